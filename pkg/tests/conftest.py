import os
from pathlib import Path

import pytest

from airlock.audit import AuditLog
from airlock.model import ZoneLayout
from airlock.scanner import SignatureScanner
from airlock.transfer import TransferEngine

# Lines collected by tests/test_acceptance.py and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


class SimulatedCrash(BaseException):
    """Raised from a crashpoint; BaseException so no handler in the code under test swallows it."""


class CrashAt:
    """Crashpoint callback that raises on the ``target``-th hit (0-based) and logs every label."""

    def __init__(self, target: int | None = None) -> None:
        self.target = target
        self.hits: list[str] = []

    def __call__(self, label: str) -> None:
        self.hits.append(label)
        if self.target is not None and len(self.hits) - 1 == self.target:
            raise SimulatedCrash(label)


@pytest.fixture
def layout(tmp_path: Path) -> ZoneLayout:
    lay = ZoneLayout(tmp_path / "sftp", tmp_path / "inside", tmp_path / "state")
    lay.ensure()
    return lay


@pytest.fixture
def audit(layout: ZoneLayout) -> AuditLog:
    return AuditLog(layout.audit_log_path)


@pytest.fixture
def engine(layout: ZoneLayout, audit: AuditLog) -> TransferEngine:
    return TransferEngine(layout, SignatureScanner(), audit)


def write_tree(base: Path, files: dict[str, bytes]) -> None:
    for rel, data in files.items():
        path = base / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)


def read_tree(base: Path) -> dict[str, bytes]:
    out = {}
    if not base.exists():
        return out
    for dirpath, _dirs, files in os.walk(base):
        for name in files:
            p = Path(dirpath) / name
            out[p.relative_to(base).as_posix()] = p.read_bytes()
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
