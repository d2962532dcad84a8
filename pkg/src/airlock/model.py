"""Principals, roles, projects and the zone layout shared by all modules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .errors import MissingRoot, OverlappingRoots

INBOX_OUTSIDE = "inbox-outside"
OUTBOX_OUTSIDE = "outbox-outside"
INBOX_INSIDE = "inbox-inside"
OUTBOX_INSIDE = "outbox-inside"
ZONE_DIR_NAMES = (INBOX_OUTSIDE, OUTBOX_OUTSIDE, INBOX_INSIDE, OUTBOX_INSIDE)


class Role(str, enum.Enum):
    MEMBER = "Member"
    DATA_STEWARD = "DataSteward"
    ECO_ADMIN = "EcoAdmin"
    SYSTEM_ADMIN = "SystemAdmin"

    @classmethod
    def parse_set(cls, text: str) -> frozenset["Role"]:
        return frozenset(cls(tok.strip()) for tok in text.split(",") if tok.strip())

    @staticmethod
    def format_set(roles) -> str:
        return ",".join(sorted(r.value for r in roles))


PROJECT_ROLES = frozenset({Role.MEMBER, Role.DATA_STEWARD, Role.ECO_ADMIN})


class AccessState(str, enum.Enum):
    ACTIVE = "Active"
    FROZEN = "Frozen"


@dataclass(frozen=True)
class Principal:
    id: str
    display_name: str = ""
    us_person: bool = False
    # Only SystemAdmin may appear here; every other role is per-project.
    global_roles: frozenset = frozenset()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("principal id must be non-empty")
        if not set(self.global_roles) <= {Role.SYSTEM_ADMIN}:
            raise ValueError("only SystemAdmin may be held globally")

    @property
    def is_system_admin(self) -> bool:
        return Role.SYSTEM_ADMIN in self.global_roles


@dataclass(frozen=True)
class ProjectRecord:
    project_id: str
    name: str
    data_root: Path
    members: Mapping[str, frozenset] = field(default_factory=dict)
    access_state: AccessState = AccessState.ACTIVE

    def __post_init__(self) -> None:
        if not self.project_id:
            raise ValueError("project id must be non-empty")
        object.__setattr__(self, "data_root", Path(self.data_root))
        if not self.data_root.is_absolute():
            raise ValueError(f"data_root must be absolute: {self.data_root}")
        frozen = {pid: frozenset(roles) for pid, roles in self.members.items() if roles}
        object.__setattr__(self, "members", MappingProxyType(frozen))
        object.__setattr__(self, "access_state", AccessState(self.access_state))

    def roles_of(self, principal_id: str) -> frozenset:
        return self.members.get(principal_id, frozenset())

    def with_member(self, principal_id: str, roles) -> "ProjectRecord":
        members = dict(self.members)
        if roles:
            members[principal_id] = frozenset(roles)
        else:
            members.pop(principal_id, None)
        return replace(self, members=members)

    @property
    def frozen(self) -> bool:
        return self.access_state is AccessState.FROZEN


class Zone(enum.Enum):
    OUTSIDE = "outside"
    INSIDE = "inside"
    STATE = "state"
    UNMANAGED = "unmanaged"


@dataclass(frozen=True)
class ZoneLayout:
    sftp_root: Path
    inside_root: Path
    state_root: Path

    def __post_init__(self) -> None:
        for name in ("sftp_root", "inside_root", "state_root"):
            object.__setattr__(self, name, Path(getattr(self, name)))

    def roots(self) -> dict[Zone, Path]:
        return {Zone.OUTSIDE: self.sftp_root, Zone.INSIDE: self.inside_root, Zone.STATE: self.state_root}

    def zone_dir(self, name: str) -> Path:
        if name in (INBOX_OUTSIDE, OUTBOX_OUTSIDE):
            return self.sftp_root / name
        if name in (INBOX_INSIDE, OUTBOX_INSIDE):
            return self.inside_root / name
        raise ValueError(f"unknown zone directory {name!r}")

    def user_dir(self, name: str, user: str) -> Path:
        return self.zone_dir(name) / user

    @property
    def journal_dir(self) -> Path:
        return self.state_root / "journal"

    @property
    def quarantine_dir(self) -> Path:
        return self.state_root / "quarantine"

    @property
    def audit_log_path(self) -> Path:
        return self.state_root / "audit.log"

    @property
    def engine_lock_path(self) -> Path:
        return self.state_root / "engine.lock"

    @property
    def cycle_lock_path(self) -> Path:
        return self.state_root / "cycle.lock"

    def ensure(self) -> None:
        """Create the roots and the four zone directories if absent."""
        for root in (self.sftp_root, self.inside_root, self.state_root):
            root.mkdir(parents=True, exist_ok=True)
        for name in ZONE_DIR_NAMES:
            self.zone_dir(name).mkdir(exist_ok=True)


def _contains(outer: Path, inner: Path) -> bool:
    return outer == inner or outer in inner.parents


def validate_layout(layout: ZoneLayout) -> None:
    """Raise unless all three roots exist as directories and are pairwise disjoint."""
    roots = [layout.sftp_root, layout.inside_root, layout.state_root]
    resolved = []
    for root in roots:
        if not root.is_dir():
            raise MissingRoot(root)
        resolved.append(root.resolve())
    for i in range(3):
        for j in range(i + 1, 3):
            if _contains(resolved[i], resolved[j]) or _contains(resolved[j], resolved[i]):
                raise OverlappingRoots(roots[i], roots[j])


def classify_path(layout: ZoneLayout, path: Path) -> Zone:
    """Assign ``path`` to a zone by longest-prefix match on the layout roots."""
    path = Path(path)
    best, best_len = Zone.UNMANAGED, -1
    for zone, root in layout.roots().items():
        if _contains(root, path) and len(root.parts) > best_len:
            best, best_len = zone, len(root.parts)
    return best
