"""Per-job egress approvals, shared between access control and the transfer engine."""

from __future__ import annotations

from datetime import datetime
from pathlib import Path

from . import records


class EgressApprovals:
    """One record per approved egress job under ``state_root/approvals``.

    A grant covers exactly one job id and is revoked when that job reaches a
    terminal state, so an approval never carries over to later files.
    """

    def __init__(self, state_root: Path) -> None:
        self.directory = Path(state_root) / "approvals"

    def _path(self, job_id: str) -> Path:
        if not job_id or "/" in job_id or job_id.startswith("."):
            raise ValueError(f"invalid job id {job_id!r}")
        return self.directory / job_id

    def grant(self, job_id: str, actor: str, granted_at: datetime, audit_seq: int) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        records.atomic_write(self._path(job_id), records.dumps([
            ("job_id", job_id),
            ("actor", actor),
            ("granted_at", records.format_ts(granted_at)),
            ("audit_seq", str(audit_seq)),
        ]))

    def is_granted(self, job_id: str) -> bool:
        return self._path(job_id).is_file()

    def approver(self, job_id: str) -> str | None:
        try:
            pairs = records.loads(self._path(job_id).read_text())
        except FileNotFoundError:
            return None
        return records.first(pairs, "actor", "")

    def revoke(self, job_id: str) -> None:
        self._path(job_id).unlink(missing_ok=True)
