"""Permission isolation auditing for project trees.

A project tree has top-level directories owned by the service account, held
by the project group, mode exactly 750, and inner data directories where
members write. :func:`audit_tree` checks a live tree against that policy;
:func:`snapshot_baseline` and :func:`diff_baseline` catch changes after the
fact, with every change to a frozen tree raised as an alert.
"""

from __future__ import annotations

import enum
import os
import stat
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import records
from .audit import AuditAction, AuditLog
from .errors import IoFailure

TOP_DIR_MODE = 0o750
DEFAULT_SENTINEL_INTERVAL_S = 3600


class FindingKind(str, enum.Enum):
    WRONG_MODE = "WrongMode"
    WRONG_OWNER = "WrongOwner"
    WRONG_GROUP = "WrongGroup"
    WORLD_WRITABLE = "WorldWritable"
    UNEXPECTED_TOP_LEVEL_ENTRY = "UnexpectedTopLevelEntry"
    FROZEN_TREE_MODIFIED = "FrozenTreeModified"
    ADDED = "Added"
    REMOVED = "Removed"
    UNREADABLE = "Unreadable"


class Severity(str, enum.Enum):
    ALERT = "Alert"
    WARN = "Warn"


@dataclass(frozen=True, order=True)
class Finding:
    path: str
    kind: FindingKind
    severity: Severity
    actual: int | None = None
    expected: int | None = None
    note: str = ""

    def __post_init__(self) -> None:
        if self.kind is FindingKind.WRONG_MODE and (self.actual is None or self.expected is None):
            raise ValueError("WrongMode findings carry both the actual and expected mode")

    def describe(self) -> str:
        if self.kind is FindingKind.WRONG_MODE:
            return f"{self.kind.value}({self.actual:o}, {self.expected:o})"
        if self.actual is not None:
            return f"{self.kind.value}({self.actual}, {self.expected})"
        return self.kind.value


@dataclass(frozen=True)
class PermissionPolicy:
    project_id: str
    top_dirs: tuple[Path, ...]
    data_dirs: tuple[Path, ...]
    expected_group: int
    owner_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "top_dirs", tuple(Path(p) for p in self.top_dirs))
        object.__setattr__(self, "data_dirs", tuple(Path(p) for p in self.data_dirs))
        for d in self.data_dirs:
            if not any(top in d.parents for top in self.top_dirs):
                raise ValueError(f"data dir {d} is not inside any top dir")


def parse_policy_file(path: Path) -> dict[str, PermissionPolicy]:
    """Read ``project=`` blocks of ``top_dir=``, ``data_dir=``, ``group=``, ``owner_id=`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    blocks: dict[str, dict] = {}
    current = None
    for lineno, key, value in records.iter_pairs(
            "\n".join(ln for ln in text.splitlines() if not ln.lstrip().startswith("#"))):
        if key == "project":
            current = blocks.setdefault(value, {"top_dir": [], "data_dir": []})
        elif current is None:
            raise ValueError(f"{path}:{lineno}: {key}= before any project= line")
        elif key in ("top_dir", "data_dir"):
            current[key].append(Path(value))
        elif key in ("group", "owner_id"):
            current[key] = int(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    out = {}
    for pid, b in blocks.items():
        if "group" not in b or "owner_id" not in b:
            raise ValueError(f"{path}: project {pid} needs group= and owner_id=")
        out[pid] = PermissionPolicy(pid, tuple(b["top_dir"]), tuple(b["data_dir"]), b["group"], b["owner_id"])
    return out


# -- tree walking ----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class TreeEntry:
    path: str  # relative to the snapshot root; the root itself is "."
    uid: int
    gid: int
    mode: int
    kind: str  # dir | file | link | other


def _kind(st: os.stat_result) -> str:
    if stat.S_ISDIR(st.st_mode):
        return "dir"
    if stat.S_ISLNK(st.st_mode):
        return "link"
    if stat.S_ISREG(st.st_mode):
        return "file"
    return "other"


def _walk(root: Path, on_error=None) -> dict[Path, os.stat_result]:
    """lstat every entry under ``root`` without following links."""
    out: dict[Path, os.stat_result] = {}
    try:
        out[root] = os.lstat(root)
    except OSError as exc:
        if on_error is None:
            raise
        on_error(root, exc)
        return out
    stack = [root] if stat.S_ISDIR(out[root].st_mode) else []
    while stack:
        directory = stack.pop()
        try:
            with os.scandir(directory) as it:
                children = list(it)
        except OSError as exc:
            if on_error is None:
                raise
            on_error(directory, exc)
            continue
        for child in children:
            path = Path(child.path)
            try:
                st = child.stat(follow_symlinks=False)
            except OSError as exc:
                if on_error is None:
                    raise
                on_error(path, exc)
                continue
            out[path] = st
            if stat.S_ISDIR(st.st_mode):
                stack.append(path)
    return out


def tree_entries(root: Path) -> list[TreeEntry]:
    root = Path(root)
    try:
        walked = _walk(root)
    except OSError as exc:
        raise IoFailure(getattr(exc, "filename", None) or root, exc.strerror or str(exc)) from exc
    entries = []
    for path, st in walked.items():
        rel = "." if path == root else path.relative_to(root).as_posix()
        entries.append(TreeEntry(rel, st.st_uid, st.st_gid, stat.S_IMODE(st.st_mode), _kind(st)))
    return sorted(entries)


# -- auditing --------------------------------------------------------------------


def _emit(audit: AuditLog | None, action: AuditAction, project_id: str | None, findings: Iterable[Finding]) -> None:
    if audit is None:
        return
    for f in findings:
        detail = {"path": f.path, "kind": f.kind.value}
        if f.actual is not None:
            detail["actual"] = f"{f.actual:o}" if f.kind is FindingKind.WRONG_MODE else str(f.actual)
            detail["expected"] = f"{f.expected:o}" if f.kind is FindingKind.WRONG_MODE else str(f.expected)
        if f.note:
            detail["note"] = f.note
        audit.append(action, project_id=project_id, detail=detail)


def audit_tree(policy: PermissionPolicy, root: Path, audit: AuditLog | None = None) -> list[Finding]:
    """Every deviation of the tree at ``root`` from ``policy``, ordered by path.

    Emits one PermissionViolation event per Alert when ``audit`` is given.
    """
    if not policy.top_dirs and not policy.data_dirs:
        return []
    root = Path(root)
    findings: set[Finding] = set()

    def unreadable(path: Path, exc: OSError) -> None:
        findings.add(Finding(str(path), FindingKind.UNREADABLE, Severity.WARN, note=exc.strerror or str(exc)))

    walked = _walk(root, unreadable)

    def lookup(path: Path) -> os.stat_result | None:
        if path in walked:
            return walked[path]
        try:
            return os.lstat(path)
        except FileNotFoundError:
            findings.add(Finding(str(path), FindingKind.UNREADABLE, Severity.WARN, note="missing"))
        except OSError as exc:
            unreadable(path, exc)
        return None

    allowed = set(policy.top_dirs) | set(policy.data_dirs)
    for p in list(allowed):
        allowed.update(p.parents)

    for top in policy.top_dirs:
        st = lookup(top)
        if st is None:
            continue
        if not stat.S_ISDIR(st.st_mode):
            findings.add(Finding(str(top), FindingKind.UNREADABLE, Severity.WARN, note="not a directory"))
            continue
        if st.st_uid != policy.owner_id:
            findings.add(Finding(str(top), FindingKind.WRONG_OWNER, Severity.ALERT, st.st_uid, policy.owner_id))
        if st.st_gid != policy.expected_group:
            findings.add(Finding(str(top), FindingKind.WRONG_GROUP, Severity.ALERT, st.st_gid, policy.expected_group))
        mode = stat.S_IMODE(st.st_mode)
        if mode != TOP_DIR_MODE:
            findings.add(Finding(str(top), FindingKind.WRONG_MODE, Severity.ALERT, mode, TOP_DIR_MODE))
        children = [p for p in walked if p.parent == top] if top in walked else []
        for child in children:
            if child not in allowed:
                findings.add(Finding(str(child), FindingKind.UNEXPECTED_TOP_LEVEL_ENTRY, Severity.ALERT))

    for data in policy.data_dirs:
        st = lookup(data)
        if st is None:
            continue
        if st.st_gid != policy.expected_group:
            findings.add(Finding(str(data), FindingKind.WRONG_GROUP, Severity.ALERT, st.st_gid, policy.expected_group))

    for path, st in walked.items():
        if not stat.S_ISLNK(st.st_mode) and st.st_mode & stat.S_IWOTH:
            findings.add(Finding(str(path), FindingKind.WORLD_WRITABLE, Severity.ALERT))

    ordered = sorted(findings)
    _emit(audit, AuditAction.PERMISSION_VIOLATION, policy.project_id,
          [f for f in ordered if f.severity is Severity.ALERT])
    return ordered


# -- baselines --------------------------------------------------------------------


@dataclass(frozen=True)
class Baseline:
    root: Path
    entries: tuple[TreeEntry, ...]

    def dumps(self) -> str:
        pairs = [("root", str(self.root))]
        pairs += [("entry", f"{e.kind} {e.mode:o} {e.uid} {e.gid} {e.path}") for e in self.entries]
        return records.dumps(pairs)

    @classmethod
    def loads(cls, text: str) -> "Baseline":
        pairs = records.loads(text)
        entries = []
        for key, value in pairs:
            if key == "entry":
                kind, mode, uid, gid, path = value.split(" ", 4)
                entries.append(TreeEntry(path, int(uid), int(gid), int(mode, 8), kind))
        return cls(Path(records.first(pairs, "root")), tuple(sorted(entries)))


def snapshot_baseline(root: Path) -> Baseline:
    root = Path(root)
    return Baseline(root, tuple(tree_entries(root)))


def baseline_path(state_root: Path, project_id: str) -> Path:
    return Path(state_root) / "baselines" / project_id


def save_baseline(state_root: Path, project_id: str, baseline: Baseline) -> Path:
    path = baseline_path(state_root, project_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    records.atomic_write(path, baseline.dumps())
    return path


def load_baseline(state_root: Path, project_id: str) -> Baseline | None:
    path = baseline_path(state_root, project_id)
    if not path.is_file():
        return None
    return Baseline.loads(path.read_text(encoding="utf-8"))


def _inside_any(rel: str, data_rels: list[str]) -> bool:
    return any(rel.startswith(d + "/") for d in data_rels)


def diff_baseline(baseline: Baseline, root: Path | None = None, frozen: bool = False, *,
                  data_dirs: Iterable[Path] = (), audit: AuditLog | None = None,
                  project_id: str | None = None) -> list[Finding]:
    """Compare the live tree with ``baseline``.

    Mode, owner and group changes are Alerts; additions and removals are Warn,
    except inside ``data_dirs`` where they are ordinary member activity. On a
    frozen tree every difference is a FrozenTreeModified Alert.
    """
    root = Path(root) if root is not None else baseline.root
    current = {e.path: e for e in tree_entries(root)}
    before = {e.path: e for e in baseline.entries}
    data_rels = []
    for d in data_dirs:
        d = Path(d)
        if d == root or root in d.parents:
            data_rels.append(d.relative_to(root).as_posix())

    changes: list[Finding] = []
    for rel in sorted(set(before) | set(current)):
        path = str(root / rel) if rel != "." else str(root)
        old, new = before.get(rel), current.get(rel)
        if old is None:
            if frozen or not _inside_any(rel, data_rels):
                changes.append(Finding(path, FindingKind.ADDED, Severity.WARN, note=new.kind))
            continue
        if new is None:
            if frozen or not _inside_any(rel, data_rels):
                changes.append(Finding(path, FindingKind.REMOVED, Severity.WARN, note=old.kind))
            continue
        if old.kind != new.kind:
            changes.append(Finding(path, FindingKind.ADDED, Severity.WARN, note=f"{old.kind} -> {new.kind}"))
            continue
        if old.mode != new.mode and new.kind != "link":
            changes.append(Finding(path, FindingKind.WRONG_MODE, Severity.ALERT, new.mode, old.mode))
        if old.uid != new.uid:
            changes.append(Finding(path, FindingKind.WRONG_OWNER, Severity.ALERT, new.uid, old.uid))
        if old.gid != new.gid:
            changes.append(Finding(path, FindingKind.WRONG_GROUP, Severity.ALERT, new.gid, old.gid))

    if frozen:
        notes: dict[str, list[str]] = {}
        for f in changes:
            notes.setdefault(f.path, []).append(f.describe() + (f" {f.note}" if f.note else ""))
        out = [Finding(p, FindingKind.FROZEN_TREE_MODIFIED, Severity.ALERT, note="; ".join(n))
               for p, n in sorted(notes.items())]
        _emit(audit, AuditAction.FROZEN_ACCESS_ATTEMPT, project_id, out)
        return out
    out = sorted(changes)
    _emit(audit, AuditAction.PERMISSION_VIOLATION, project_id, [f for f in out if f.severity is Severity.ALERT])
    return out
