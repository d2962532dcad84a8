"""Append-only, hash-chained audit log.

Each line is one record: ``seq``, RFC 3339 timestamp, actor, project id,
action, the sorted ``key=value`` detail pairs, ``prev_hash`` hex and
``this_hash`` hex, separated by the ASCII unit separator (0x1F).
``this_hash`` is the SHA-256 of the record bytes up to and including the
separator that precedes it, so it commits to ``prev_hash`` and every other
field. Record 0 chains from 32 zero bytes.
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterator, Mapping

from .errors import AuditError, IoFailure
from .records import format_ts, parse_ts, utcnow

log = logging.getLogger(__name__)

SEP = "\x1f"
GENESIS = bytes(32)
SYSTEM_ACTOR = "system"

_ESC = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", SEP: "\\u"}
_UNESC = {"\\": "\\", "n": "\n", "r": "\r", "u": SEP}


class AuditAction(str, enum.Enum):
    TRANSFER_DETECTED = "TransferDetected"
    FILE_SCANNED = "FileScanned"
    FILE_PROMOTED = "FilePromoted"
    FILE_QUARANTINED = "FileQuarantined"
    TRANSFER_REJECTED = "TransferRejected"
    EGRESS_AUTHORIZED = "EgressAuthorized"
    EGRESS_DENIED = "EgressDenied"
    MEMBERSHIP_CHANGED = "MembershipChanged"
    PROJECT_FROZEN = "ProjectFrozen"
    PROJECT_RESTORED = "ProjectRestored"
    PERMISSION_VIOLATION = "PermissionViolation"
    FROZEN_ACCESS_ATTEMPT = "FrozenAccessAttempt"
    SESSION_OPENED = "SessionOpened"
    SESSION_CLOSED = "SessionClosed"
    JOURNAL_CORRUPT = "JournalCorrupt"


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: datetime
    actor: str
    project_id: str | None
    action: AuditAction
    detail: Mapping[str, str] = field(default_factory=dict)
    prev_hash: bytes = GENESIS
    this_hash: bytes = GENESIS

    def __post_init__(self) -> None:
        object.__setattr__(self, "detail", MappingProxyType(dict(self.detail)))


def _esc(text: str) -> str:
    return "".join(_ESC.get(ch, ch) for ch in text)


def _unesc(text: str) -> str:
    out, it = [], iter(text)
    for ch in it:
        if ch == "\\":
            nxt = next(it, None)
            if nxt not in _UNESC:
                raise ValueError("bad escape")
            out.append(_UNESC[nxt])
        else:
            out.append(ch)
    return "".join(out)


def _body(seq: int, ts: datetime, actor: str, project_id: str | None, action: AuditAction,
          detail: Mapping[str, str], prev_hash: bytes) -> str:
    fields = [str(seq), format_ts(ts), _esc(actor), _esc(project_id or ""), action.value]
    for key in sorted(detail):
        if not key or "=" in key:
            raise ValueError(f"invalid detail key {key!r}")
        fields.append(f"{_esc(key)}={_esc(str(detail[key]))}")
    fields.append(prev_hash.hex())
    return SEP.join(fields) + SEP


def encode_event(event: AuditEvent) -> bytes:
    body = _body(event.seq, event.timestamp, event.actor, event.project_id, event.action,
                 event.detail, event.prev_hash)
    return (body + event.this_hash.hex() + "\n").encode("utf-8")


def chain_hash(hash_input: bytes) -> bytes:
    return hashlib.sha256(hash_input).digest()


def decode_record(line: bytes) -> AuditEvent:
    """Parse one record (without its newline); raises ValueError if malformed or inconsistent."""
    text = line.decode("utf-8")
    fields = text.split(SEP)
    if len(fields) < 7:
        raise ValueError("too few fields")
    seq_s, ts_s, actor, project, action = fields[:5]
    prev_hex, this_hex = fields[-2], fields[-1]
    if not seq_s.isdigit() or str(int(seq_s)) != seq_s:
        raise ValueError("bad seq")
    detail = {}
    for pair in fields[5:-2]:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError("bad detail pair")
        detail[_unesc(key)] = _unesc(value)
    for hx in (prev_hex, this_hex):
        if len(hx) != 64 or hx != hx.lower():
            raise ValueError("bad hash field")
    event = AuditEvent(int(seq_s), parse_ts(ts_s), _unesc(actor), _unesc(project) or None,
                       AuditAction(action), detail, bytes.fromhex(prev_hex), bytes.fromhex(this_hex))
    # The record must re-serialize to the exact same bytes.
    if encode_event(event) != line + b"\n":
        raise ValueError("non-canonical record")
    return event


class AuditLog:
    """One deployment-wide log file. Appends are serialized across threads and processes."""

    def __init__(self, path: Path, clock: Callable[[], datetime] = utcnow) -> None:
        self.path = Path(path)
        self.clock = clock
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    # -- writing -------------------------------------------------------------

    def append(self, action: AuditAction, *, actor: str = SYSTEM_ACTOR, project_id: str | None = None,
               detail: Mapping[str, str] | None = None) -> AuditEvent:
        """Assign the next seq, chain, persist durably, and return the event."""
        detail = {k: str(v) for k, v in (detail or {}).items()}
        with self._lock:
            try:
                fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o600)
            except OSError as exc:
                raise AuditError(f"cannot open audit log: {exc}") from exc
            try:
                fcntl.flock(fd, fcntl.LOCK_EX)
                seq, prev = self._tail_state(fd)
                ts = self.clock()
                body = _body(seq, ts, actor, project_id, AuditAction(action), detail, prev)
                this = chain_hash(body.encode("utf-8"))
                record = (body + this.hex() + "\n").encode("utf-8")
                os.write(fd, record)
                os.fsync(fd)
            except AuditError:
                raise
            except (OSError, ValueError) as exc:
                raise AuditError(f"audit append failed: {exc}") from exc
            finally:
                os.close(fd)
        return AuditEvent(seq, ts, actor, project_id, AuditAction(action), detail, prev, this)

    def _tail_state(self, fd: int) -> tuple[int, bytes]:
        size = os.fstat(fd).st_size
        if size == 0:
            return 0, GENESIS
        if os.pread(fd, 1, size - 1) != b"\n":
            size = self._repair_torn_tail(fd, size)
            if size == 0:
                return 0, GENESIS
        # Read backwards from the final newline to the previous record boundary.
        pos, buf = size - 1, b""
        while True:
            start = max(0, pos - 4096)
            buf = os.pread(fd, pos - start, start) + buf
            nl = buf.rfind(b"\n")
            if nl != -1:
                buf = buf[nl + 1:]
                break
            if start == 0:
                break
            pos = start
        try:
            last = decode_record(buf)
        except ValueError as exc:
            raise AuditError(f"last audit record is unreadable ({exc}); run 'audit verify'") from exc
        return last.seq + 1, last.this_hash

    def _repair_torn_tail(self, fd: int, size: int) -> int:
        """Move a partial trailing record aside and truncate the log to the last full record."""
        data = os.pread(fd, size, 0)
        cut = data.rfind(b"\n") + 1
        torn = self.path.with_name(f"{self.path.name}.torn-{os.getpid()}-{size}")
        torn.write_bytes(data[cut:])
        os.ftruncate(fd, cut)
        os.fsync(fd)
        log.warning("audit log ended mid-record; %d bytes moved to %s", size - cut, torn)
        return cut

    # -- reading -------------------------------------------------------------

    def _lines(self) -> list[bytes]:
        try:
            data = self.path.read_bytes()
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise IoFailure(self.path, str(exc)) from exc
        return data.split(b"\n")

    def __iter__(self) -> Iterator[AuditEvent]:
        lines = self._lines()
        # The last element is either empty or an unterminated (in-flight) record.
        for line in lines[:-1]:
            yield decode_record(line)

    def events(self) -> list[AuditEvent]:
        return list(self)

    def verify(self) -> int | None:
        """Return the first seq whose record fails verification, or None if intact."""
        return verify_chain(self.path)

    def query(self, *, project_id: str | None = None, actor: str | None = None,
              action: AuditAction | str | None = None, since: datetime | None = None,
              until: datetime | None = None, detail: Mapping[str, str] | None = None) -> list[AuditEvent]:
        """Events matching every given filter, in seq order. ``until`` is exclusive."""
        want_action = AuditAction(action) if action is not None else None
        out = []
        for ev in self:
            if project_id is not None and ev.project_id != project_id:
                continue
            if actor is not None and ev.actor != actor:
                continue
            if want_action is not None and ev.action is not want_action:
                continue
            if since is not None and ev.timestamp < since:
                continue
            if until is not None and ev.timestamp >= until:
                continue
            if detail and any(ev.detail.get(k) != v for k, v in detail.items()):
                continue
            out.append(ev)
        return out


def verify_chain(path: Path) -> int | None:
    """Recompute every hash in the log at ``path``.

    Returns the smallest seq (record position) that fails, or None for an
    intact or empty log. Hash fields are compared as exact lowercase hex.
    """
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        return None
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    if not data:
        return None
    lines = data.split(b"\n")
    prev = GENESIS
    for seq, line in enumerate(lines[:-1]):
        sep_at = line.rfind(SEP.encode())
        if sep_at == -1:
            return seq
        try:
            event = decode_record(line)
        except (ValueError, UnicodeDecodeError):
            return seq
        if event.seq != seq or event.prev_hash != prev:
            return seq
        if chain_hash(line[:sep_at + 1]) != event.this_hash:
            return seq
        prev = event.this_hash
    # An unterminated final record fails on its own.
    if lines[-1] != b"":
        return len(lines) - 1
    return None
