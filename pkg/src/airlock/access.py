"""Project membership, access decisions, egress approval, and freeze/restore.

Membership is changed only by a project's EcoAdmin (or a global
SystemAdmin). Freezing a finished project chmods its tree to 700/600, hands
it to the service account and flips the project to Frozen; a persisted
receipt holds everything needed to put membership and modes back exactly.
"""

from __future__ import annotations

import os
import stat
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterator, Mapping

from . import records
from .approvals import EgressApprovals
from .audit import AuditAction, AuditEvent, AuditLog
from .errors import (AlreadyFrozen, FrozenProject, IoFailure, NonUsPerson, NotAuthorized,
                     NotFrozen, ReceiptMismatch, UnknownPrincipal, UnknownProject)
from .fsutil import file_lock
from .model import PROJECT_ROLES, AccessState, Principal, ProjectRecord, Role, ZoneLayout
from .sentinel import TreeEntry, save_baseline, snapshot_baseline, tree_entries
from .transfer import TransferDirection, TransferJob

FROZEN_DIR_MODE = 0o700
FROZEN_FILE_MODE = 0o600

# Stable denial reasons.
REASON_FROZEN = "frozen"
REASON_NOT_MEMBER = "not-a-member"
REASON_NOT_STEWARD = "not-a-data-steward"
REASON_PROJECT_MISMATCH = "project-mismatch"
REASON_JOB_NOT_PENDING = "job-not-pending"


def _check_name(kind: str, name: str) -> str:
    if not name or "/" in name or name.startswith(".") or "\n" in name or "\0" in name:
        raise ValueError(f"invalid {kind} identifier {name!r}")
    return name


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    reason: str = ""

    def __post_init__(self) -> None:
        if self.allowed == bool(self.reason):
            raise ValueError("a reason is required exactly when access is denied")

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = AccessDecision(True)


def decide_access(project: ProjectRecord, subject_id: str, *, system_admin: bool = False) -> AccessDecision:
    """Pure access rule: admins always; members only while the project is Active."""
    if system_admin:
        return ALLOW
    if project.frozen:
        return AccessDecision(False, REASON_FROZEN)
    if project.roles_of(subject_id):
        return ALLOW
    return AccessDecision(False, REASON_NOT_MEMBER)


# -- persistence ------------------------------------------------------------------


class PrincipalDirectory:
    def __init__(self, state_root: Path) -> None:
        self.directory = Path(state_root) / "principals"

    def save(self, principal: Principal) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        records.atomic_write(self.directory / _check_name("principal", principal.id), records.dumps([
            ("id", principal.id),
            ("display_name", principal.display_name),
            ("us_person", "true" if principal.us_person else "false"),
            ("global_roles", Role.format_set(principal.global_roles)),
        ]))

    def get(self, principal_id: str) -> Principal:
        try:
            path = self.directory / _check_name("principal", principal_id)
            pairs = dict(records.loads(path.read_text(encoding="utf-8")))
        except (FileNotFoundError, ValueError):
            raise UnknownPrincipal(principal_id) from None
        return Principal(pairs["id"], pairs.get("display_name", ""), pairs.get("us_person") == "true",
                         Role.parse_set(pairs.get("global_roles", "")))

    def all(self) -> list[Principal]:
        if not self.directory.is_dir():
            return []
        return [self.get(p.name) for p in sorted(self.directory.iterdir()) if not p.name.startswith(".")]


def _encode_members(members: Mapping[str, frozenset]) -> list[tuple[str, str]]:
    return [("member", f"{Role.format_set(roles)} {pid}") for pid, roles in sorted(members.items())]


def _decode_members(pairs: list[tuple[str, str]]) -> dict[str, frozenset]:
    out = {}
    for key, value in pairs:
        if key == "member":
            roles, pid = value.split(" ", 1)
            out[pid] = Role.parse_set(roles)
    return out


class ProjectStore:
    """One ``field=value`` file per project under ``state_root/projects``."""

    def __init__(self, state_root: Path) -> None:
        self.state_root = Path(state_root)
        self.directory = self.state_root / "projects"

    def path(self, project_id: str) -> Path:
        return self.directory / _check_name("project", project_id)

    def exists(self, project_id: str) -> bool:
        return self.path(project_id).is_file()

    def save(self, project: ProjectRecord) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        records.atomic_write(self.path(project.project_id), records.dumps([
            ("project_id", project.project_id),
            ("name", project.name),
            ("data_root", str(project.data_root)),
            ("access_state", project.access_state.value),
            *_encode_members(project.members),
        ]))

    def load(self, project_id: str) -> ProjectRecord:
        try:
            pairs = records.loads(self.path(project_id).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UnknownProject(project_id) from None
        get = dict(pairs)
        return ProjectRecord(get["project_id"], get["name"], Path(get["data_root"]),
                             _decode_members(pairs), AccessState(get["access_state"]))

    def all(self) -> list[ProjectRecord]:
        if not self.directory.is_dir():
            return []
        return [self.load(p.name) for p in sorted(self.directory.iterdir()) if not p.name.startswith(".")]

    @contextmanager
    def locked(self, project_id: str) -> Iterator[None]:
        with file_lock(self.state_root / "locks" / f"project-{_check_name('project', project_id)}.lock"):
            yield


# -- freeze receipts ----------------------------------------------------------------


@dataclass(frozen=True)
class FreezeReceipt:
    project_id: str
    frozen_at: datetime
    prior_membership: Mapping[str, frozenset]
    prior_modes: tuple[TreeEntry, ...]
    status: str = field(default="frozen", compare=False)  # freezing | frozen | restoring

    def __post_init__(self) -> None:
        object.__setattr__(self, "prior_membership",
                           MappingProxyType({k: frozenset(v) for k, v in self.prior_membership.items()}))
        object.__setattr__(self, "prior_modes", tuple(sorted(self.prior_modes)))

    def dumps(self) -> str:
        pairs = [
            ("project_id", self.project_id),
            ("frozen_at", records.format_ts(self.frozen_at)),
            ("status", self.status),
            *_encode_members(self.prior_membership),
        ]
        pairs += [("mode", f"{e.mode:o} {e.uid} {e.gid} {e.kind} {e.path}") for e in self.prior_modes]
        return records.dumps(pairs)

    @classmethod
    def loads(cls, text: str) -> "FreezeReceipt":
        pairs = records.loads(text)
        modes = []
        for key, value in pairs:
            if key == "mode":
                mode, uid, gid, kind, path = value.split(" ", 4)
                modes.append(TreeEntry(path, int(uid), int(gid), int(mode, 8), kind))
        get = dict(pairs)
        return cls(get["project_id"], records.parse_ts(get["frozen_at"]), _decode_members(pairs),
                   tuple(modes), get["status"])


# -- the service ----------------------------------------------------------------------


class AccessControl:
    """All membership and lifecycle mutations, each audited with actor attribution.

    ``last_event`` holds the audit event produced by the most recent mutation.
    ``on_frozen`` is called with the project after a freeze completes.
    """

    def __init__(self, layout: ZoneLayout, audit: AuditLog, *, service_owner_id: int | None = None,
                 clock: Callable[[], datetime] = records.utcnow,
                 crashpoint: Callable[[str], None] | None = None,
                 on_frozen: Callable[[ProjectRecord], None] | None = None) -> None:
        self.layout = layout
        self.audit = audit
        self.principals = PrincipalDirectory(layout.state_root)
        self.store = ProjectStore(layout.state_root)
        self.approvals = EgressApprovals(layout.state_root)
        self.receipt_dir = layout.state_root / "receipts"
        self.service_owner_id = os.geteuid() if service_owner_id is None else service_owner_id
        self.clock = clock
        self.crashpoint = crashpoint or (lambda label: None)
        self.on_frozen = on_frozen
        self.last_event: AuditEvent | None = None

    def _emit(self, action: AuditAction, actor: str, project_id: str | None, **detail) -> AuditEvent:
        self.last_event = self.audit.append(action, actor=actor, project_id=project_id, detail=detail)
        return self.last_event

    @staticmethod
    def _is_eco(actor: Principal, project: ProjectRecord) -> bool:
        return actor.is_system_admin or Role.ECO_ADMIN in project.roles_of(actor.id)

    # -- principals and projects -------------------------------------------------

    def register_principal(self, principal: Principal, actor: str = "system") -> Principal:
        self.principals.save(principal)
        self._emit(AuditAction.MEMBERSHIP_CHANGED, actor, None, change="principal-registered",
                   subject=principal.id, us_person=str(principal.us_person).lower(),
                   global_roles=Role.format_set(principal.global_roles))
        return principal

    def create_project(self, actor: Principal, project_id: str, name: str, data_root: Path) -> ProjectRecord:
        if not actor.is_system_admin:
            raise NotAuthorized(actor.id, "create projects")
        _check_name("project", project_id)
        with self.store.locked(project_id):
            if self.store.exists(project_id):
                raise ValueError(f"project {project_id} already exists")
            project = ProjectRecord(project_id, name, Path(data_root))
            self._emit(AuditAction.MEMBERSHIP_CHANGED, actor.id, project_id, change="project-created",
                       path=str(project.data_root))
            self.store.save(project)
        return project

    def set_membership(self, actor: Principal, project: ProjectRecord | str, subject: str,
                       roles=frozenset()) -> ProjectRecord:
        """Grant ``roles`` to ``subject`` on the project, or remove them when empty."""
        project_id = project if isinstance(project, str) else project.project_id
        roles = frozenset(Role(r) for r in roles)
        if not roles <= PROJECT_ROLES:
            raise ValueError("SystemAdmin is a global role and cannot be granted per project")
        with self.store.locked(project_id):
            current = self.store.load(project_id)
            if not self._is_eco(actor, current):
                raise NotAuthorized(actor.id, f"change membership of {project_id}")
            if current.frozen:
                raise FrozenProject(project_id)
            if roles and not self.principals.get(subject).us_person:
                raise NonUsPerson(subject)
            updated = current.with_member(subject, roles)
            self._emit(AuditAction.MEMBERSHIP_CHANGED, actor.id, project_id, subject=subject,
                       roles=Role.format_set(roles), previous=Role.format_set(current.roles_of(subject)))
            self.store.save(updated)
        return updated

    def effective_access(self, project: ProjectRecord, subject: str) -> AccessDecision:
        try:
            admin = self.principals.get(subject).is_system_admin
        except UnknownPrincipal:
            admin = False
        return decide_access(project, subject, system_admin=admin)

    # -- egress ------------------------------------------------------------------

    def authorize_egress(self, actor: Principal, project: ProjectRecord | str, job: TransferJob) -> AccessDecision:
        """One DataSteward on an Active project approves one egress job.

        The decision is audited before it is returned; an approval is recorded
        for the job only after its EgressAuthorized event is durable.
        """
        if job.direction is not TransferDirection.EGRESS:
            raise ValueError(f"job {job.job_id} is not an egress job")
        project_id = project if isinstance(project, str) else project.project_id
        current = self.store.load(project_id)
        if current.frozen:
            decision = AccessDecision(False, REASON_FROZEN)
        elif job.project_id != current.project_id:
            decision = AccessDecision(False, REASON_PROJECT_MISMATCH)
        elif job.terminal:
            decision = AccessDecision(False, REASON_JOB_NOT_PENDING)
        elif Role.DATA_STEWARD not in current.roles_of(actor.id):
            decision = AccessDecision(False, REASON_NOT_STEWARD)
        else:
            decision = ALLOW
        detail = {"job_id": job.job_id, "user": job.user, "files": str(len(job.payload)),
                  "self_approval": str(actor.id == job.user).lower()}
        if decision.allowed:
            event = self._emit(AuditAction.EGRESS_AUTHORIZED, actor.id, project_id, **detail)
            self.approvals.grant(job.job_id, actor.id, event.timestamp, event.seq)
        else:
            self._emit(AuditAction.EGRESS_DENIED, actor.id, project_id, reason=decision.reason, **detail)
        return decision

    # -- freeze / restore ----------------------------------------------------------

    def receipt_path(self, project_id: str) -> Path:
        return self.receipt_dir / _check_name("project", project_id)

    def load_receipt(self, project_id: str) -> FreezeReceipt | None:
        path = self.receipt_path(project_id)
        if not path.is_file():
            return None
        return FreezeReceipt.loads(path.read_text(encoding="utf-8"))

    def _save_receipt(self, receipt: FreezeReceipt) -> None:
        self.receipt_dir.mkdir(parents=True, exist_ok=True)
        records.atomic_write(self.receipt_path(receipt.project_id), receipt.dumps())

    def freeze_project(self, actor: Principal, project: ProjectRecord | str) -> FreezeReceipt:
        """Remove all non-admin access to a finished project, in place."""
        project_id = project if isinstance(project, str) else project.project_id
        with self.store.locked(project_id):
            current = self.store.load(project_id)
            if not self._is_eco(actor, current):
                raise NotAuthorized(actor.id, f"freeze {project_id}")
            if current.frozen:
                raise AlreadyFrozen(project_id)
            receipt = FreezeReceipt(project_id, self.clock(), dict(current.members),
                                    tuple(tree_entries(current.data_root)), status="freezing")
            self._save_receipt(receipt)
            self.crashpoint("freeze-receipt-written")
            receipt = self._finish_freeze(actor.id, current, receipt)
        if self.on_frozen is not None:
            self.on_frozen(self.store.load(project_id))
        return receipt

    def _finish_freeze(self, actor_id: str, project: ProjectRecord, receipt: FreezeReceipt,
                       recovered: bool = False) -> FreezeReceipt:
        root = project.data_root
        for entry in receipt.prior_modes:
            if entry.kind == "link":
                continue
            path = root if entry.path == "." else root / entry.path
            try:
                st = os.lstat(path)
                if st.st_uid != self.service_owner_id:
                    os.chown(path, self.service_owner_id, -1, follow_symlinks=False)
                os.chmod(path, FROZEN_DIR_MODE if stat.S_ISDIR(st.st_mode) else FROZEN_FILE_MODE)
            except FileNotFoundError:
                continue
            except OSError as exc:
                raise IoFailure(path, exc.strerror or str(exc)) from exc
            self.crashpoint("freeze-chmod")
        self.store.save(replace(project, access_state=AccessState.FROZEN))
        self.crashpoint("freeze-project-saved")
        detail = {"path": str(root), "entries": str(len(receipt.prior_modes)),
                  "frozen_at": records.format_ts(receipt.frozen_at)}
        if recovered:
            detail["recovered"] = "true"
        self._emit(AuditAction.PROJECT_FROZEN, actor_id, project.project_id, **detail)
        self.crashpoint("freeze-audited")
        save_baseline(self.layout.state_root, project.project_id, snapshot_baseline(root))
        self.crashpoint("freeze-baselined")
        receipt = replace(receipt, status="frozen")
        self._save_receipt(receipt)
        self.crashpoint("freeze-receipt-final")
        return receipt

    def restore_project(self, actor: Principal, receipt: FreezeReceipt,
                        project_id: str | None = None) -> ProjectRecord:
        """Put membership and every recorded mode back exactly as the receipt says."""
        if project_id is not None and project_id != receipt.project_id:
            raise ReceiptMismatch(f"receipt is for {receipt.project_id}, not {project_id}")
        project_id = receipt.project_id
        with self.store.locked(project_id):
            current = self.store.load(project_id)
            eco_before = Role.ECO_ADMIN in receipt.prior_membership.get(actor.id, frozenset())
            if not (self._is_eco(actor, current) or eco_before):
                raise NotAuthorized(actor.id, f"restore {project_id}")
            if not current.frozen:
                raise NotFrozen(project_id)
            stored = self.load_receipt(project_id)
            if stored is None or stored != receipt:
                raise ReceiptMismatch(f"receipt does not match the recorded freeze of {project_id}")
            receipt = replace(stored, status="restoring")
            self._save_receipt(receipt)
            self.crashpoint("restore-journaled")
            return self._finish_restore(actor.id, current, receipt)

    def _finish_restore(self, actor_id: str, project: ProjectRecord, receipt: FreezeReceipt,
                        recovered: bool = False) -> ProjectRecord:
        root = project.data_root
        # Children before parents so a restrictive parent mode cannot block its subtree.
        for entry in reversed(receipt.prior_modes):
            if entry.kind == "link":
                continue
            path = root if entry.path == "." else root / entry.path
            try:
                st = os.lstat(path)
                if (st.st_uid, st.st_gid) != (entry.uid, entry.gid):
                    os.chown(path, entry.uid, entry.gid, follow_symlinks=False)
                os.chmod(path, entry.mode)
            except FileNotFoundError:
                continue
            except OSError as exc:
                raise IoFailure(path, exc.strerror or str(exc)) from exc
            self.crashpoint("restore-chmod")
        restored = replace(project, members=dict(receipt.prior_membership), access_state=AccessState.ACTIVE)
        self.store.save(restored)
        self.crashpoint("restore-project-saved")
        detail = {"path": str(root), "entries": str(len(receipt.prior_modes)),
                  "frozen_at": records.format_ts(receipt.frozen_at)}
        if recovered:
            detail["recovered"] = "true"
        self._emit(AuditAction.PROJECT_RESTORED, actor_id, project.project_id, **detail)
        self.crashpoint("restore-audited")
        save_baseline(self.layout.state_root, project.project_id, snapshot_baseline(root))
        done = self.receipt_dir / "restored"
        done.mkdir(parents=True, exist_ok=True)
        os.replace(self.receipt_path(project.project_id),
                   done / f"{project.project_id}-{receipt.frozen_at:%Y%m%dT%H%M%S%f}")
        self.crashpoint("restore-receipt-archived")
        return restored

    def recover_incomplete(self) -> list[str]:
        """Finish any freeze or restore interrupted by a crash; returns project ids touched."""
        touched = []
        if not self.receipt_dir.is_dir():
            return touched
        for path in sorted(self.receipt_dir.iterdir()):
            if not path.is_file() or path.name.startswith("."):
                continue
            receipt = FreezeReceipt.loads(path.read_text(encoding="utf-8"))
            with self.store.locked(receipt.project_id):
                project = self.store.load(receipt.project_id)
                if receipt.status == "freezing":
                    self._finish_freeze("system", project, receipt, recovered=True)
                elif receipt.status == "restoring":
                    self._finish_restore("system", project, receipt, recovered=True)
                else:
                    continue
            touched.append(receipt.project_id)
        return touched
