"""Flag-file triggered transfers across the enclave boundary.

A user drops files into their directory under ``inbox-outside`` (ingress) or
``outbox-inside`` (egress), then a ``.transfer-ready`` flag file. Each cycle
the engine turns every flagged directory into a journaled :class:`TransferJob`,
scans the payload and either promotes the whole batch to the other side or
moves the whole batch to quarantine.

Every state change is journaled before the next file operation. A payload file
is always in exactly one of: its source directory, a staging directory on the
target filesystem, its destination, or quarantine. Staging residue found on
recovery is rolled back to the source.
"""

from __future__ import annotations

import enum
import logging
import os
import shutil
import stat
import uuid
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable

from . import records
from .approvals import EgressApprovals
from .audit import AuditAction, AuditLog
from .errors import (AirlockError, EgressNotApproved, InvalidTransition, IoFailure,
                     JournalCorrupt, ScannerUnavailable)
from .fsutil import prune_empty_dirs, relocate, sha256_file
from .model import INBOX_INSIDE, INBOX_OUTSIDE, OUTBOX_INSIDE, OUTBOX_OUTSIDE, ZoneLayout
from .scanner import Scanner, Verdict

log = logging.getLogger(__name__)

FLAG_NAME = ".transfer-ready"
STAGING_NAME = ".airlock-staging"
DEFAULT_POLL_INTERVAL_S = 300
_FLAG_READ_LIMIT = 4096


class TransferDirection(str, enum.Enum):
    INGRESS = "ingress"
    EGRESS = "egress"

    @property
    def source_zone(self) -> str:
        return INBOX_OUTSIDE if self is TransferDirection.INGRESS else OUTBOX_INSIDE

    @property
    def dest_zone(self) -> str:
        return INBOX_INSIDE if self is TransferDirection.INGRESS else OUTBOX_OUTSIDE

    def dest_root(self, layout: ZoneLayout) -> Path:
        return layout.inside_root if self is TransferDirection.INGRESS else layout.sftp_root


class JobState(str, enum.Enum):
    DETECTED = "Detected"
    SCANNING = "Scanning"
    PROMOTED = "Promoted"
    QUARANTINED = "Quarantined"
    REJECTED = "Rejected"

    @property
    def terminal(self) -> bool:
        return self in (JobState.PROMOTED, JobState.QUARANTINED, JobState.REJECTED)


_EDGES = {
    JobState.DETECTED: {JobState.SCANNING, JobState.REJECTED},
    JobState.SCANNING: {JobState.PROMOTED, JobState.QUARANTINED},
}

PROMOTE = "promote"
QUARANTINE = "quarantine"


@dataclass(frozen=True)
class PayloadEntry:
    path: str
    size: int
    digest: str  # SHA-256 hex; empty for entries that are not regular files


@dataclass(frozen=True)
class TransferJob:
    job_id: str
    user: str
    project_id: str
    direction: TransferDirection
    payload: tuple[PayloadEntry, ...]
    state: JobState
    created_at: datetime
    finished_at: datetime | None = None
    outcome: str | None = None
    error: str | None = None
    flag_consumed: bool = True

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    def advance(self, state: JobState, **changes) -> "TransferJob":
        if state not in _EDGES.get(self.state, ()):
            raise InvalidTransition(f"{self.job_id}: {self.state.value} -> {state.value}")
        return replace(self, state=state, **changes)


def new_job_id(now: datetime) -> str:
    return f"{now:%Y%m%dT%H%M%S}-{uuid.uuid4().hex[:12]}"


def is_safe_relpath(path: str) -> bool:
    if not path or "\0" in path or path.startswith("/"):
        return False
    return all(part not in ("", ".", "..") for part in path.split("/"))


# -- journal -------------------------------------------------------------------


def _encode_job(job: TransferJob) -> str:
    pairs = [
        ("job_id", job.job_id),
        ("user", job.user),
        ("project", job.project_id),
        ("direction", job.direction.value),
        ("state", job.state.value),
        ("created_at", records.format_ts(job.created_at)),
        ("finished_at", records.format_ts(job.finished_at) if job.finished_at else ""),
        ("outcome", job.outcome or ""),
        ("error", job.error or ""),
        ("flag", "consumed" if job.flag_consumed else "pending"),
    ]
    pairs += [("file", f"{e.size} {e.digest or '-'} {e.path}") for e in job.payload]
    return records.dumps(pairs)


def _decode_job(job_id: str, text: str) -> TransferJob:
    try:
        pairs = records.loads(text)
        get = dict(pairs)
        payload = []
        for key, value in pairs:
            if key != "file":
                continue
            size, digest, path = value.split(" ", 2)
            if digest == "-":
                digest = ""
            elif len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
                raise ValueError(f"bad digest for {path}")
            payload.append(PayloadEntry(path, int(size), digest))
        job = TransferJob(
            job_id=get["job_id"],
            user=get["user"],
            project_id=get["project"],
            direction=TransferDirection(get["direction"]),
            payload=tuple(payload),
            state=JobState(get["state"]),
            created_at=records.parse_ts(get["created_at"]),
            finished_at=records.parse_ts(get["finished_at"]) if get["finished_at"] else None,
            outcome=get["outcome"] or None,
            error=get["error"] or None,
            flag_consumed=get["flag"] == "consumed",
        )
    except (KeyError, ValueError) as exc:
        raise JournalCorrupt(job_id, str(exc) or type(exc).__name__) from None
    if job.job_id != job_id:
        raise JournalCorrupt(job_id, "record names a different job")
    if job.outcome not in (None, PROMOTE, QUARANTINE):
        raise JournalCorrupt(job_id, f"unknown outcome {job.outcome!r}")
    return job


class Journal:
    """One record per job under ``state_root/journal``; finished jobs move to ``done/``."""

    def __init__(self, directory: Path) -> None:
        self.directory = Path(directory)
        self.done_dir = self.directory / "done"
        self.corrupt_dir = self.directory / "corrupt"

    def _ensure(self) -> None:
        self.done_dir.mkdir(parents=True, exist_ok=True)

    def write(self, job: TransferJob) -> None:
        self._ensure()
        records.atomic_write(self.directory / job.job_id, _encode_job(job))

    def archive(self, job_id: str) -> None:
        self._ensure()
        os.replace(self.directory / job_id, self.done_dir / job_id)

    def active_ids(self) -> list[str]:
        if not self.directory.is_dir():
            return []
        return sorted(p.name for p in self.directory.iterdir()
                      if p.is_file() and not p.name.startswith("."))

    def done_ids(self) -> list[str]:
        if not self.done_dir.is_dir():
            return []
        return sorted(p.name for p in self.done_dir.iterdir() if not p.name.startswith("."))

    def load(self, job_id: str) -> TransferJob:
        for base in (self.directory, self.done_dir):
            path = base / job_id
            if path.is_file():
                try:
                    return _decode_job(job_id, path.read_text(encoding="utf-8"))
                except UnicodeDecodeError:
                    raise JournalCorrupt(job_id, "not UTF-8") from None
        raise KeyError(job_id)

    def set_aside(self, job_id: str) -> Path:
        self.corrupt_dir.mkdir(parents=True, exist_ok=True)
        dest = self.corrupt_dir / job_id
        os.replace(self.directory / job_id, dest)
        return dest


# -- engine ----------------------------------------------------------------------


@dataclass
class CycleReport:
    cycle_started: datetime
    jobs: list[tuple[str, JobState]] = field(default_factory=list)
    files_promoted: int = 0
    files_quarantined: int = 0
    errors: list[str] = field(default_factory=list)

    def record(self, before: TransferJob | None, job: TransferJob) -> None:
        if before is not None and before.state is job.state and before.outcome == job.outcome:
            return
        self.jobs.append((job.job_id, job.state))
        if job.state is JobState.PROMOTED:
            self.files_promoted += len(job.payload)
        elif job.state is JobState.QUARANTINED:
            self.files_quarantined += len(job.payload)


def _stat_key(st: os.stat_result) -> tuple:
    # ctime cannot be set from userspace, so an unchanged key means unchanged bytes.
    return (st.st_dev, st.st_ino, st.st_size, st.st_mtime_ns, st.st_ctime_ns)


def _free_name(path: Path) -> Path:
    if not os.path.lexists(path):
        return path
    n = 1
    while os.path.lexists(f"{path}.{n}"):
        n += 1
    return Path(f"{path}.{n}")


def _collect_payload(user_dir: Path) -> list[PayloadEntry]:
    out: list[PayloadEntry] = []

    def walk(directory: Path, prefix: str) -> None:
        with os.scandir(directory) as it:
            entries = sorted(it, key=lambda e: e.name)
        for entry in entries:
            if not prefix and entry.name == FLAG_NAME:
                continue
            rel = prefix + entry.name
            st = entry.stat(follow_symlinks=False)
            if stat.S_ISDIR(st.st_mode):
                walk(Path(entry.path), rel + "/")
            elif stat.S_ISREG(st.st_mode):
                out.append(PayloadEntry(rel, st.st_size, sha256_file(Path(entry.path))))
            else:
                out.append(PayloadEntry(rel, 0, ""))

    walk(user_dir, "")
    return sorted(out, key=lambda e: e.path)


def _entry_problem(base: Path, rel: str) -> str | None:
    """Why ``base/rel`` is not an acceptable payload file, or None."""
    if not is_safe_relpath(rel):
        return "unsafe-path"
    parts = rel.split("/")
    cur = base
    for i, part in enumerate(parts):
        cur = cur / part
        try:
            st = os.lstat(cur)
        except FileNotFoundError:
            return "missing"
        except OSError as exc:
            return f"unreadable: {exc.strerror}"
        if stat.S_ISLNK(st.st_mode):
            return "symlink"
        if i < len(parts) - 1:
            if not stat.S_ISDIR(st.st_mode):
                return "not-a-directory"
        elif not stat.S_ISREG(st.st_mode):
            return "not-a-regular-file"
    return None


def _read_flag_project(flag: Path) -> str | None:
    try:
        with open(flag, "rb") as fh:
            text = fh.read(_FLAG_READ_LIMIT).decode("utf-8", "replace")
    except OSError:
        return None
    for line in text.splitlines():
        key, sep, value = line.strip().partition("=")
        if sep and key.strip() == "project" and value.strip():
            return value.strip()
    return None


class TransferEngine:
    """Detect, validate, scan, promote or quarantine, and recover transfer jobs.

    ``crashpoint`` is called with a label after every durable step; tests use
    it to inject crashes. ``project_resolver`` maps a user to a project when
    the flag file does not name one with a ``project=<id>`` line.
    """

    def __init__(self, layout: ZoneLayout, scanner: Scanner, audit: AuditLog, *,
                 approvals: EgressApprovals | None = None,
                 project_resolver: Callable[[str], str | None] | None = None,
                 clock: Callable[[], datetime] = records.utcnow,
                 crashpoint: Callable[[str], None] | None = None) -> None:
        self.layout = layout
        self.scanner = scanner
        self.audit = audit
        self.approvals = approvals or EgressApprovals(layout.state_root)
        self.project_resolver = project_resolver
        self.clock = clock
        self.crashpoint = crashpoint or (lambda label: None)
        self.journal = Journal(layout.journal_dir)

    # -- paths -----------------------------------------------------------------

    def source_dir(self, job: TransferJob) -> Path:
        return self.layout.user_dir(job.direction.source_zone, job.user)

    def dest_dir(self, job: TransferJob) -> Path:
        return self.layout.user_dir(job.direction.dest_zone, job.user)

    def quarantine_dir(self, job: TransferJob) -> Path:
        return self.layout.quarantine_dir / job.job_id

    def _staging_roots(self, job: TransferJob) -> dict[str, Path]:
        return {
            PROMOTE: job.direction.dest_root(self.layout) / STAGING_NAME / job.job_id,
            QUARANTINE: self.layout.state_root / STAGING_NAME / job.job_id,
        }

    def _audit(self, action: AuditAction, job: TransferJob, **detail) -> None:
        detail = {"job_id": job.job_id, "user": job.user, "direction": job.direction.value, **detail}
        self.audit.append(action, project_id=job.project_id or None, detail=detail)

    def _needs_approval(self, job: TransferJob) -> bool:
        return (job.direction is TransferDirection.EGRESS and bool(job.payload)
                and job.outcome is None and not self.approvals.is_granted(job.job_id))

    # -- detection ---------------------------------------------------------------

    def _claimed_paths(self, direction: TransferDirection) -> dict[str, set[str]]:
        claimed: dict[str, set[str]] = defaultdict(set)
        for job_id in self.journal.active_ids():
            try:
                job = self.journal.load(job_id)
            except (JournalCorrupt, KeyError):
                continue
            if job.direction is direction and not job.terminal:
                claimed[job.user].update(e.path for e in job.payload)
        return claimed

    def detect_ready_transfers(self, direction: TransferDirection,
                               errors: list[str] | None = None) -> list[TransferJob]:
        """Create one journaled Detected job per user directory holding a flag file."""
        errors = errors if errors is not None else []
        zone = self.layout.zone_dir(direction.source_zone)
        try:
            with os.scandir(zone) as it:
                user_dirs = sorted((e for e in it if e.is_dir(follow_symlinks=False)), key=lambda e: e.name)
        except FileNotFoundError:
            return []
        except OSError as exc:
            errors.append(str(IoFailure(zone, exc.strerror or str(exc))))
            return []
        claimed = self._claimed_paths(direction)
        jobs = []
        for entry in user_dirs:
            user, user_dir = entry.name, Path(entry.path)
            flag = user_dir / FLAG_NAME
            try:
                if not stat.S_ISREG(os.lstat(flag).st_mode):
                    errors.append(f"{flag}: flag is not a regular file; ignored")
                    continue
            except FileNotFoundError:
                continue
            except OSError as exc:
                errors.append(str(IoFailure(flag, exc.strerror or str(exc))))
                continue
            try:
                project = _read_flag_project(flag)
                if project is None and self.project_resolver is not None:
                    project = self.project_resolver(user)
                payload = [e for e in _collect_payload(user_dir) if e.path not in claimed[user]]
            except OSError as exc:
                errors.append(str(IoFailure(user_dir, exc.strerror or str(exc))))
                continue
            now = self.clock()
            job = TransferJob(new_job_id(now), user, project or "", direction, tuple(payload),
                              JobState.DETECTED, now, flag_consumed=False)
            self.journal.write(job)
            self.crashpoint("detected-journaled")
            self._audit(AuditAction.TRANSFER_DETECTED, job, files=len(payload))
            self.crashpoint("detected-audited")
            job = self._consume_flag(job)
            jobs.append(job)
        return jobs

    def _consume_flag(self, job: TransferJob) -> TransferJob:
        (self.source_dir(job) / FLAG_NAME).unlink(missing_ok=True)
        self.crashpoint("flag-removed")
        job = replace(job, flag_consumed=True)
        self.journal.write(job)
        self.crashpoint("flag-consumed")
        return job

    # -- validation ----------------------------------------------------------------

    def validate_payload(self, job: TransferJob) -> TransferJob:
        """Reject the job if any entry is not a traversal-free path to a regular file."""
        if job.state is not JobState.DETECTED:
            raise InvalidTransition(f"{job.job_id}: validate requires Detected, not {job.state.value}")
        base = self.source_dir(job)
        problems = [(e.path, why) for e in job.payload if (why := _entry_problem(base, e.path))]
        if not problems:
            return job
        for path, why in problems:
            self._audit(AuditAction.TRANSFER_REJECTED, job, path=path, reason=why)
        job = job.advance(JobState.REJECTED, finished_at=self.clock(),
                          error="; ".join(f"{p}: {w}" for p, w in problems))
        self.journal.write(job)
        self.crashpoint("rejected-journaled")
        self.journal.archive(job.job_id)
        return job

    # -- execution -------------------------------------------------------------------

    def _scan_all(self, job: TransferJob) -> str:
        base = self.source_dir(job)
        outcome = PROMOTE
        for entry in job.payload:
            path = base / entry.path
            try:
                before = os.lstat(path)
                if not stat.S_ISREG(before.st_mode):
                    raise FileNotFoundError(path)
            except FileNotFoundError:
                self._audit(AuditAction.FILE_SCANNED, job, path=entry.path, verdict="Missing")
                outcome = QUARANTINE
                continue
            result = self.scanner.scan(path)
            digest = sha256_file(path)
            changed = digest != entry.digest or _stat_key(os.lstat(path)) != _stat_key(before)
            if result.verdict is Verdict.ERROR:
                self._audit(AuditAction.FILE_SCANNED, job, path=entry.path, verdict="Error",
                            reason=result.reason or "")
                raise ScannerUnavailable(f"{job.job_id}/{entry.path}: {result.reason}")
            detail = {"path": entry.path, "verdict": result.verdict.value,
                      "bytes": result.scanned_bytes, "digest": entry.digest}
            if result.infected:
                detail["signature"] = result.signature
            if changed:
                # Bytes differ from what was flagged; the verdict covers something else.
                detail["changed"] = "true"
            self._audit(AuditAction.FILE_SCANNED, job, **detail)
            if result.infected or changed:
                outcome = QUARANTINE
        return outcome

    def _rollback_staging(self, job: TransferJob) -> int:
        """Return staged residue to the source (or drop it if the source survived)."""
        base = self.source_dir(job)
        restored = 0
        for root in self._staging_roots(job).values():
            if not root.exists():
                continue
            for dirpath, dirnames, filenames in os.walk(root):
                for name in filenames + [d for d in dirnames if os.path.islink(os.path.join(dirpath, d))]:
                    staged = Path(dirpath) / name
                    rel = staged.relative_to(root).as_posix()
                    src = base / rel
                    if os.path.lexists(src):
                        staged.unlink()
                    else:
                        relocate(staged, src)
                        restored += 1
            shutil.rmtree(root)
        return restored

    def _place(self, job: TransferJob, entry: PayloadEntry, outcome: str) -> Path | None:
        src = self.source_dir(job) / entry.path
        if not os.path.lexists(src):
            return None  # placed before a crash
        stage_root = self._staging_roots(job)[outcome]
        staged = stage_root / entry.path
        relocate(src, staged)
        self.crashpoint("staged")
        route = self.dest_dir(job) if outcome == PROMOTE else self.quarantine_dir(job)
        action = AuditAction.FILE_PROMOTED if outcome == PROMOTE else AuditAction.FILE_QUARANTINED
        extra = {}
        if outcome == PROMOTE:
            st = os.lstat(staged)
            if not stat.S_ISREG(st.st_mode) or sha256_file(staged) != entry.digest:
                route, action = self.quarantine_dir(job), AuditAction.FILE_QUARANTINED
                extra["reason"] = "changed-after-scan"
        final = _free_name(route / entry.path)
        relocate(staged, final)
        self.crashpoint("placed")
        self._audit(action, job, path=entry.path, dest=str(final), **extra)
        prune_empty_dirs(src.parent, self.source_dir(job))
        return final

    def execute_transfer(self, job: TransferJob) -> TransferJob:
        """Scan the payload and move the whole batch to its destination or to quarantine."""
        if job.terminal:
            return job
        if self._needs_approval(job):
            raise EgressNotApproved(job.job_id)
        if job.state is JobState.DETECTED:
            job = job.advance(JobState.SCANNING)
            self.journal.write(job)
            self.crashpoint("scanning-journaled")
        if job.outcome is None:
            outcome = self._scan_all(job)
            self.crashpoint("scanned")
            job = replace(job, outcome=outcome, error=None)
            self.journal.write(job)
            self.crashpoint("outcome-journaled")
        self._rollback_staging(job)
        for entry in job.payload:
            self._place(job, entry, job.outcome)
        for root in self._staging_roots(job).values():
            shutil.rmtree(root, ignore_errors=True)
            try:
                root.parent.rmdir()
            except OSError:
                pass
        final_state = JobState.PROMOTED if job.outcome == PROMOTE else JobState.QUARANTINED
        action = AuditAction.FILE_PROMOTED if final_state is JobState.PROMOTED else AuditAction.FILE_QUARANTINED
        self._audit(action, job, scope="job", state=final_state.value, files=len(job.payload))
        self.crashpoint("terminal-audited")
        job = job.advance(final_state, finished_at=self.clock(), error=None)
        self.journal.write(job)
        self.crashpoint("terminal-journaled")
        self.journal.archive(job.job_id)
        self.approvals.revoke(job.job_id)
        return job

    def _drive(self, job: TransferJob) -> TransferJob:
        if job.state is JobState.DETECTED:
            job = self.validate_payload(job)
            if job.terminal or self._needs_approval(job):
                return job
        return self.execute_transfer(job)

    def _drive_safely(self, job: TransferJob, report: CycleReport) -> TransferJob:
        try:
            return self._drive(job)
        except (AirlockError, OSError) as exc:
            if isinstance(exc, ScannerUnavailable):
                report.errors.append(f"scanner unavailable: {exc}")
            else:
                report.errors.append(f"{job.job_id}: {exc}")
            # Keep the reason on the job so status output shows why it is stuck.
            try:
                current = self.journal.load(job.job_id)
                if not current.terminal:
                    self.journal.write(replace(current, error=str(exc)))
                return current
            except (KeyError, JournalCorrupt):
                pass
        try:
            return self.journal.load(job.job_id)
        except (KeyError, JournalCorrupt):
            return job

    # -- recovery -----------------------------------------------------------------

    def pending_jobs(self) -> list[TransferJob]:
        """Journaled, non-terminal jobs (including egress waiting for approval)."""
        out = []
        for job_id in self.journal.active_ids():
            try:
                job = self.journal.load(job_id)
            except (JournalCorrupt, KeyError):
                continue
            if not job.terminal:
                out.append(job)
        return out

    def recover_incomplete(self, report: CycleReport | None = None) -> list[TransferJob]:
        """Drive every journaled non-terminal job as far as it can go."""
        report = report if report is not None else CycleReport(self.clock())
        out = []
        for job_id in self.journal.active_ids():
            try:
                job = self.journal.load(job_id)
            except JournalCorrupt as exc:
                self.journal.set_aside(job_id)
                self.audit.append(AuditAction.JOURNAL_CORRUPT, detail={"job_id": job_id, "reason": str(exc)})
                report.errors.append(str(exc))
                continue
            except KeyError:
                continue
            if job.terminal:
                self.journal.archive(job_id)
                self.approvals.revoke(job_id)
                continue
            before = job
            if not job.flag_consumed:
                if not self.audit.query(action=AuditAction.TRANSFER_DETECTED, detail={"job_id": job_id}):
                    self._audit(AuditAction.TRANSFER_DETECTED, job, files=len(job.payload), recovered="true")
                job = self._consume_flag(job)
            job = self._drive_safely(job, report)
            report.record(before, job)
            out.append(job)
        return out

    def run_cycle(self, directions: Iterable[TransferDirection] = tuple(TransferDirection),
                  now: datetime | None = None,
                  should_stop: Callable[[], bool] | None = None) -> CycleReport:
        """Recover, then detect, validate and execute for each direction."""
        should_stop = should_stop or (lambda: False)
        report = CycleReport(now or self.clock())
        self.recover_incomplete(report)
        for direction in sorted(set(directions), key=lambda d: d.value, reverse=True):
            if should_stop():
                break
            for job in self.detect_ready_transfers(direction, report.errors):
                if should_stop():
                    # Left journaled as Detected for the next cycle.
                    report.record(None, job)
                    continue
                report.record(None, self._drive_safely(job, report))
        return report
