"""Stateless per-user virtual sessions.

A session is an overlay directory (``delta/`` plus a ``manifest`` naming the
golden image and its digest) layered over a read-only golden image, with the
user's home directory attached as the only persistent share. Closing a session
deletes the overlay and its journal entry; nothing the session wrote survives
outside the home share. No hypervisor is started unless an exec hook is
configured.
"""

from __future__ import annotations

import enum
import os
import shlex
import shutil
import signal
import subprocess
import uuid
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Callable

from . import records
from .audit import AuditAction, AuditEvent, AuditLog
from .errors import InsecureHomeShare, MissingGoldenImage, SessionAlreadyOpen, UnknownSession
from .fsutil import file_lock, sha256_file
from .model import ZoneLayout

DEFAULT_MEMORY_MB = 8192
DEFAULT_CPU_CORES = 2


class SessionState(str, enum.Enum):
    OPEN = "Open"
    CLOSED = "Closed"


@dataclass(frozen=True)
class SessionSpec:
    user: str
    golden_image: Path
    memory_mb: int = DEFAULT_MEMORY_MB
    cpu_cores: int = DEFAULT_CPU_CORES

    def __post_init__(self) -> None:
        object.__setattr__(self, "golden_image", Path(self.golden_image))
        if self.memory_mb <= 0 or self.cpu_cores <= 0:
            raise ValueError("memory_mb and cpu_cores must be positive")
        if not self.user or "/" in self.user or self.user.startswith("."):
            raise ValueError(f"invalid user {self.user!r}")


@dataclass(frozen=True)
class SessionHandle:
    session_id: str
    spec: SessionSpec
    overlay_path: Path
    share_path: Path
    state: SessionState
    opened_at: datetime
    closed_at: datetime | None = None
    base_digest: str = ""
    owner_pid: int | None = None
    owner_start: str = ""
    hook_pid: int | None = None


def process_start_token(pid: int) -> str:
    """Kernel start time of ``pid`` (guards against pid reuse); empty if unknown."""
    try:
        text = Path(f"/proc/{pid}/stat").read_text()
    except OSError:
        return ""
    return text.rsplit(")", 1)[-1].split()[19]


def process_alive(pid: int | None, start_token: str = "") -> bool:
    if not pid:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        pass
    if start_token:
        current = process_start_token(pid)
        if current and current != start_token:
            return False
    return True


def _encode(handle: SessionHandle) -> str:
    return records.dumps([
        ("session_id", handle.session_id),
        ("user", handle.spec.user),
        ("state", handle.state.value),
        ("golden_image", str(handle.spec.golden_image)),
        ("base_digest", handle.base_digest),
        ("memory_mb", str(handle.spec.memory_mb)),
        ("cpu_cores", str(handle.spec.cpu_cores)),
        ("overlay", str(handle.overlay_path)),
        ("share", str(handle.share_path)),
        ("opened_at", records.format_ts(handle.opened_at)),
        ("owner_pid", str(handle.owner_pid or "")),
        ("owner_start", handle.owner_start),
        ("hook_pid", str(handle.hook_pid or "")),
    ])


def _decode(text: str) -> SessionHandle:
    get = dict(records.loads(text))
    spec = SessionSpec(get["user"], Path(get["golden_image"]), int(get["memory_mb"]), int(get["cpu_cores"]))
    return SessionHandle(
        session_id=get["session_id"], spec=spec, overlay_path=Path(get["overlay"]),
        share_path=Path(get["share"]), state=SessionState(get["state"]),
        opened_at=records.parse_ts(get["opened_at"]), base_digest=get["base_digest"],
        owner_pid=int(get["owner_pid"]) if get["owner_pid"] else None,
        owner_start=get.get("owner_start", ""),
        hook_pid=int(get["hook_pid"]) if get.get("hook_pid") else None,
    )


class SessionBroker:
    """Open, close and reap sessions; one open session per user."""

    def __init__(self, layout: ZoneLayout, audit: AuditLog, *, home_root: Path,
                 exec_hook: str | None = None,
                 clock: Callable[[], datetime] = records.utcnow) -> None:
        self.layout = layout
        self.audit = audit
        self.home_root = Path(home_root)
        self.exec_hook = exec_hook
        self.clock = clock
        self.root = layout.state_root / "sessions"
        self.overlay_root = self.root / "overlays"
        self.journal_dir = self.root / "journal"
        self.lock_path = self.root / "broker.lock"
        self.overlay_root.mkdir(parents=True, exist_ok=True)
        self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.lock_path.touch(exist_ok=True)
        self.last_event: AuditEvent | None = None

    # -- journal -----------------------------------------------------------------

    def sessions(self) -> list[SessionHandle]:
        out = []
        for path in sorted(self.journal_dir.iterdir()):
            if path.name.startswith("."):
                continue
            out.append(_decode(path.read_text(encoding="utf-8")))
        return out

    def get(self, session_id: str) -> SessionHandle:
        path = self.journal_dir / session_id
        if "/" in session_id or not path.is_file():
            raise UnknownSession(session_id)
        return _decode(path.read_text(encoding="utf-8"))

    def _write(self, handle: SessionHandle) -> None:
        records.atomic_write(self.journal_dir / handle.session_id, _encode(handle))

    def check_share(self, user: str) -> Path:
        share = self.home_root / user
        try:
            st = os.lstat(share)
        except FileNotFoundError:
            raise InsecureHomeShare(share, "does not exist") from None
        if not os.path.isdir(share) or os.path.islink(share):
            raise InsecureHomeShare(share, "not a directory")
        if st.st_mode & 0o077:
            raise InsecureHomeShare(share, f"mode {st.st_mode & 0o777:o} is not 700")
        return share

    # -- lifecycle ---------------------------------------------------------------

    def open_session(self, spec: SessionSpec, owner_pid: int | None = None) -> SessionHandle:
        with file_lock(self.lock_path):
            if not spec.golden_image.is_file():
                raise MissingGoldenImage(spec.golden_image)
            if any(h.spec.user == spec.user and h.state is SessionState.OPEN for h in self.sessions()):
                raise SessionAlreadyOpen(spec.user)
            share = self.check_share(spec.user)
            owner_pid = owner_pid or os.getpid()
            session_id = uuid.uuid4().hex
            overlay = self.overlay_root / session_id
            handle = SessionHandle(session_id, spec, overlay, share, SessionState.OPEN, self.clock(),
                                   base_digest=sha256_file(spec.golden_image), owner_pid=owner_pid,
                                   owner_start=process_start_token(owner_pid))
            # Journal first: a crash before the overlay exists still leaves a reapable entry.
            self._write(handle)
            (overlay / "delta").mkdir(parents=True, mode=0o700)
            records.atomic_write(overlay / "manifest", records.dumps([
                ("base_image", str(spec.golden_image)),
                ("base_digest", handle.base_digest),
                ("session_id", session_id),
                ("user", spec.user),
                ("opened_at", records.format_ts(handle.opened_at)),
            ]))
            self.last_event = self.audit.append(AuditAction.SESSION_OPENED, actor=spec.user, detail={
                "session_id": session_id, "memory_mb": str(spec.memory_mb),
                "cpu_cores": str(spec.cpu_cores), "base_digest": handle.base_digest,
                "share": str(share)})
            if self.exec_hook:
                handle = replace(handle, hook_pid=self._launch(handle))
                self._write(handle)
            return handle

    def _launch(self, handle: SessionHandle) -> int:
        argv = [arg.replace("{overlay}", str(handle.overlay_path))
                   .replace("{memory_mb}", str(handle.spec.memory_mb))
                   .replace("{cores}", str(handle.spec.cpu_cores))
                for arg in shlex.split(self.exec_hook)]
        proc = subprocess.Popen(argv, stdin=subprocess.DEVNULL, start_new_session=True)
        return proc.pid

    def close_session(self, handle: SessionHandle | str, reason: str = "closed") -> SessionHandle:
        """Delete the overlay and forget the session. Closing twice is a no-op."""
        session_id = handle if isinstance(handle, str) else handle.session_id
        with file_lock(self.lock_path):
            try:
                current = self.get(session_id)
            except UnknownSession:
                if isinstance(handle, SessionHandle):
                    return replace(handle, state=SessionState.CLOSED, closed_at=handle.closed_at or self.clock())
                raise
            if current.hook_pid and process_alive(current.hook_pid):
                try:
                    os.killpg(current.hook_pid, signal.SIGTERM)
                except OSError:
                    pass
            shutil.rmtree(current.overlay_path, ignore_errors=True)
            if current.overlay_path.exists():
                shutil.rmtree(current.overlay_path)
            self.last_event = self.audit.append(AuditAction.SESSION_CLOSED, actor=current.spec.user, detail={
                "session_id": session_id, "reason": reason})
            (self.journal_dir / session_id).unlink()
            return replace(current, state=SessionState.CLOSED, closed_at=self.clock())

    def close_user_sessions(self, user: str, reason: str) -> int:
        closed = 0
        for h in self.sessions():
            if h.spec.user == user and h.state is SessionState.OPEN:
                self.close_session(h.session_id, reason=reason)
                closed += 1
        return closed

    def reap_orphans(self) -> int:
        """Force-close every open session whose owning process is gone."""
        reaped = 0
        for h in self.sessions():
            alive = process_alive(h.owner_pid, h.owner_start) or (h.hook_pid and process_alive(h.hook_pid))
            if h.state is SessionState.OPEN and not alive:
                self.close_session(h.session_id, reason="orphan")
                reaped += 1
        return reaped
