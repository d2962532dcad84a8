"""Malware scan contract with a built-in signature scanner and a command adapter.

Both scanners return a :class:`ScanResult`. ``Error`` verdicts mean "no
verdict"; the transfer engine retries them and never treats them as clean.
"""

from __future__ import annotations

import enum
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

# Split so that on-access scanners do not flag this source file.
EICAR = (
    b"X5O!P%@AP[4\\PZX54(P^)7CC)7}$"
    + b"EICAR-STANDARD-ANTIVIRUS-TEST-FILE!"
    + b"$H+H*"
)
EICAR_NAME = "EICAR-Test-Signature"
DEFAULT_TIMEOUT_S = 120.0
_CHUNK = 1 << 16


class Verdict(str, enum.Enum):
    CLEAN = "Clean"
    INFECTED = "Infected"
    ERROR = "Error"


@dataclass(frozen=True)
class ScanResult:
    verdict: Verdict
    signature: str | None = None
    reason: str | None = None
    scanned_bytes: int = 0
    duration_ms: int = 0

    def __post_init__(self) -> None:
        if self.verdict is Verdict.INFECTED and not self.signature:
            raise ValueError("an Infected verdict needs a signature name")
        if self.verdict is not Verdict.INFECTED and self.signature:
            raise ValueError("only an Infected verdict carries a signature")

    @property
    def clean(self) -> bool:
        return self.verdict is Verdict.CLEAN

    @property
    def infected(self) -> bool:
        return self.verdict is Verdict.INFECTED

    def describe(self) -> str:
        if self.infected:
            return f"Infected({self.signature})"
        if self.verdict is Verdict.ERROR:
            return f"Error({self.reason})"
        return "Clean"


class Scanner(Protocol):
    def scan(self, path: Path) -> ScanResult: ...


def _elapsed_ms(start: float) -> int:
    return int((time.monotonic() - start) * 1000)


def load_signature_file(path: Path) -> list[bytes]:
    """Parse one hex-encoded byte sequence per line; ``#`` starts a comment."""
    sigs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            seq = bytes.fromhex(line)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a hex byte sequence") from None
        if seq:
            sigs.append(seq)
    return sigs


class SignatureScanner:
    """Deterministic substring scanner: EICAR plus optional extra signatures."""

    def __init__(self, signatures: Iterable[bytes] = ()) -> None:
        self.signatures: list[tuple[str, bytes]] = [(EICAR_NAME, EICAR)]
        for seq in signatures:
            self.signatures.append((f"Hex-Signature-{seq.hex()[:32]}", bytes(seq)))
        self._overlap = max(len(s) for _, s in self.signatures) - 1

    @classmethod
    def from_file(cls, path: Path | None) -> "SignatureScanner":
        return cls(load_signature_file(path) if path else ())

    def _match(self, window: bytes) -> str | None:
        for name, seq in self.signatures:
            if seq in window:
                return name
        return None

    def scan(self, path: Path) -> ScanResult:
        start = time.monotonic()
        total = 0
        tail = b""
        try:
            with open(path, "rb") as fh:
                while True:
                    block = fh.read(_CHUNK)
                    if not block:
                        break
                    total += len(block)
                    window = tail + block
                    hit = self._match(window)
                    if hit:
                        return ScanResult(Verdict.INFECTED, signature=hit,
                                          scanned_bytes=total, duration_ms=_elapsed_ms(start))
                    tail = window[-self._overlap:] if self._overlap else b""
        except PermissionError:
            return ScanResult(Verdict.ERROR, reason="permission denied", duration_ms=_elapsed_ms(start))
        except OSError as exc:
            return ScanResult(Verdict.ERROR, reason=exc.strerror or str(exc), duration_ms=_elapsed_ms(start))
        return ScanResult(Verdict.CLEAN, scanned_bytes=total, duration_ms=_elapsed_ms(start))


class CommandScanner:
    """Run an external scanner per file.

    Exit status 0 is clean, 1 is infected (signature = last non-empty line of
    stdout, else ``UNKNOWN``), anything else or a timeout is an error. The
    template is split shell-style and ``{file}`` is substituted per argument,
    so paths are never interpreted by a shell.
    """

    def __init__(self, command_template: str, timeout: float = DEFAULT_TIMEOUT_S) -> None:
        if "{file}" not in command_template:
            raise ValueError("command template must contain the {file} placeholder")
        self.command_template = command_template
        self.argv_template = shlex.split(command_template)
        self.timeout = timeout

    def scan(self, path: Path) -> ScanResult:
        path = Path(path)
        argv = [arg.replace("{file}", str(path)) for arg in self.argv_template]
        start = time.monotonic()
        try:
            size = path.stat().st_size
        except OSError:
            size = 0
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=self.timeout,
                                  stdin=subprocess.DEVNULL)
        except subprocess.TimeoutExpired:
            return ScanResult(Verdict.ERROR, reason="timeout", duration_ms=_elapsed_ms(start))
        except OSError as exc:
            return ScanResult(Verdict.ERROR, reason=f"cannot run scanner: {exc.strerror or exc}",
                              duration_ms=_elapsed_ms(start))
        elapsed = _elapsed_ms(start)
        if proc.returncode == 0:
            return ScanResult(Verdict.CLEAN, scanned_bytes=size, duration_ms=elapsed)
        if proc.returncode == 1:
            lines = [ln.strip() for ln in proc.stdout.decode("utf-8", "replace").splitlines() if ln.strip()]
            return ScanResult(Verdict.INFECTED, signature=lines[-1] if lines else "UNKNOWN",
                              scanned_bytes=size, duration_ms=elapsed)
        return ScanResult(Verdict.ERROR, reason=f"scanner exited with status {proc.returncode}",
                          duration_ms=elapsed)


def adapter_scan(path: Path, command_template: str, timeout: float = DEFAULT_TIMEOUT_S) -> ScanResult:
    return CommandScanner(command_template, timeout).scan(path)
