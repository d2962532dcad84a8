"""The ``field=value`` line format used by journals, stores, receipts and baselines.

One pair per line, UTF-8, newline-terminated. The key runs up to the first
``=``; backslash, CR and LF inside values are escaped so a value never spans
lines. Repeated keys are allowed and keep their order.
"""

from __future__ import annotations

import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "n": "\n", "r": "\r"}


def escape(value: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in value)


def unescape(value: str) -> str:
    out = []
    it = iter(value)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        if nxt not in _UNESCAPES:
            raise ValueError(f"bad escape sequence in {value!r}")
        out.append(_UNESCAPES[nxt])
    return "".join(out)


def dumps(pairs: Iterable[tuple[str, str]]) -> str:
    lines = []
    for key, value in pairs:
        if not key or "=" in key or "\n" in key:
            raise ValueError(f"invalid record key {key!r}")
        lines.append(f"{key}={escape(str(value))}\n")
    return "".join(lines)


def iter_pairs(text: str) -> Iterator[tuple[int, str, str]]:
    """Yield ``(line_number, key, value)``; raises ValueError on malformed lines."""
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected field=value")
        yield lineno, key, unescape(value)


def loads(text: str) -> list[tuple[str, str]]:
    return [(k, v) for _, k, v in iter_pairs(text)]


def first(pairs: list[tuple[str, str]], key: str, default: str | None = None) -> str:
    for k, v in pairs:
        if k == key:
            return v
    if default is None:
        raise KeyError(key)
    return default


def fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def atomic_write(path: Path, text: str, mode: int = 0o600) -> None:
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    try:
        os.write(fd, text.encode("utf-8"))
        os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)
    fsync_dir(path.parent)


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp without zone: {text}")
    return ts.astimezone(timezone.utc)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)
