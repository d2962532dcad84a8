import os
from pathlib import Path

import pytest

from airlock import sentinel as sentinel_mod
from airlock.audit import AuditAction, AuditLog
from airlock.sentinel import (Baseline, Finding, FindingKind, PermissionPolicy, Severity, audit_tree,
                              diff_baseline, load_baseline, parse_policy_file, save_baseline,
                              snapshot_baseline)


@pytest.fixture
def tree(tmp_path):
    """root/proj (top, 750) with data/ inside; group and owner are the test process's."""
    root = tmp_path / "root"
    top = root / "proj"
    (top / "data" / "member-files").mkdir(parents=True)
    (top / "data" / "member-files" / "x.csv").write_bytes(b"x")
    os.chmod(top, 0o750)
    return root


def policy_for(root, **kw):
    top = root / "proj"
    defaults = dict(project_id="proj", top_dirs=(top,), data_dirs=(top / "data",),
                    expected_group=os.getegid(), owner_id=os.geteuid())
    defaults.update(kw)
    return PermissionPolicy(**defaults)


def kinds(findings):
    return sorted((Path(f.path).name, f.kind.value) for f in findings)


def test_compliant_tree_has_no_findings(tree):
    assert audit_tree(policy_for(tree), tree) == []


def test_top_dir_mode_owner_and_group(tree):
    os.chmod(tree / "proj", 0o755)
    findings = audit_tree(policy_for(tree, owner_id=4321, expected_group=999), tree)
    assert kinds(findings) == [("data", "WrongGroup"), ("proj", "WrongGroup"), ("proj", "WrongMode"),
                               ("proj", "WrongOwner")]
    mode = next(f for f in findings if f.kind is FindingKind.WRONG_MODE)
    assert (mode.actual, mode.expected) == (0o755, 0o750)
    assert mode.describe() == "WrongMode(755, 750)"
    assert all(f.severity is Severity.ALERT for f in findings)


def test_unexpected_top_level_entry_and_world_writable(tree):
    stray = tree / "proj" / "stray.txt"
    stray.write_bytes(b"s")
    os.chmod(tree / "proj" / "data" / "member-files" / "x.csv", 0o666)
    findings = audit_tree(policy_for(tree), tree)
    assert kinds(findings) == [("stray.txt", "UnexpectedTopLevelEntry"), ("x.csv", "WorldWritable")]


def test_symlinks_are_never_world_writable(tree):
    os.symlink("/tmp", tree / "proj" / "data" / "ln")
    assert audit_tree(policy_for(tree), tree) == []


def test_missing_policy_paths_are_warnings(tree):
    policy = policy_for(tree, top_dirs=(tree / "proj", tree / "gone"))
    (finding,) = audit_tree(policy, tree)
    assert finding.kind is FindingKind.UNREADABLE and finding.severity is Severity.WARN
    assert finding.note == "missing"


def test_unreadable_directory_is_reported(tree, monkeypatch):
    blocked = tree / "proj" / "data" / "member-files"
    real_scandir = os.scandir

    def scandir(path):
        if Path(path) == blocked:
            raise PermissionError(13, "Permission denied", str(path))
        return real_scandir(path)

    monkeypatch.setattr(sentinel_mod.os, "scandir", scandir)
    (finding,) = audit_tree(policy_for(tree), tree)
    assert finding == Finding(str(blocked), FindingKind.UNREADABLE, Severity.WARN, note="Permission denied")


def test_empty_policy_yields_nothing(tree):
    os.chmod(tree / "proj", 0o777)
    assert audit_tree(PermissionPolicy("p", (), (), 0, 0), tree) == []


def test_data_dir_must_be_inside_a_top_dir(tmp_path):
    with pytest.raises(ValueError):
        PermissionPolicy("p", (tmp_path / "a",), (tmp_path / "b" / "c",), 0, 0)


def test_alerts_are_audited(tree):
    log = AuditLog(tree.parent / "audit.log")
    os.chmod(tree / "proj", 0o700)
    audit_tree(policy_for(tree), tree, audit=log)
    (ev,) = log.events()
    assert ev.action is AuditAction.PERMISSION_VIOLATION and ev.project_id == "proj"
    assert ev.detail == {"path": str(tree / "proj"), "kind": "WrongMode", "actual": "700", "expected": "750"}


def test_policy_file_parsing(tmp_path):
    f = tmp_path / "policy.conf"
    f.write_text("# projects\nproject=p1\ntop_dir=/srv/p1\ndata_dir=/srv/p1/data\ngroup=500\nowner_id=0\n"
                 "project=p2\ntop_dir=/srv/p2\ngroup=501\nowner_id=0\n")
    policies = parse_policy_file(f)
    assert policies["p1"].data_dirs == (Path("/srv/p1/data"),)
    assert policies["p2"].expected_group == 501
    f.write_text("top_dir=/x\n")
    with pytest.raises(ValueError):
        parse_policy_file(f)
    f.write_text("project=p\ntop_dir=/x\n")
    with pytest.raises(ValueError):
        parse_policy_file(f)


# -- baselines ------------------------------------------------------------------------------


def test_baseline_round_trip(tree, tmp_path):
    base = snapshot_baseline(tree)
    assert Baseline.loads(base.dumps()) == base
    save_baseline(tmp_path / "state", "proj", base)
    assert load_baseline(tmp_path / "state", "proj") == base
    assert load_baseline(tmp_path / "state", "other") is None


def test_diff_reports_mode_changes_as_alerts_and_additions_as_warnings(tree):
    base = snapshot_baseline(tree)
    os.chmod(tree / "proj", 0o770)
    (tree / "proj" / "new.txt").write_bytes(b"n")
    (tree / "proj" / "data" / "member-new.txt").write_bytes(b"m")  # normal activity
    findings = diff_baseline(base, data_dirs=[tree / "proj" / "data"])
    assert kinds(findings) == [("new.txt", "Added"), ("proj", "WrongMode")]
    sev = {f.kind: f.severity for f in findings}
    assert sev == {FindingKind.ADDED: Severity.WARN, FindingKind.WRONG_MODE: Severity.ALERT}


def test_diff_reports_removal_and_ownership(tree):
    base = snapshot_baseline(tree)
    os.chown(tree / "proj" / "data", 1234, 5678)
    (tree / "proj" / "data" / "member-files" / "x.csv").unlink()
    findings = diff_baseline(base, tree)
    assert kinds(findings) == [("data", "WrongGroup"), ("data", "WrongOwner"), ("x.csv", "Removed")]


def test_frozen_diff_turns_every_change_into_one_alert_per_path(tree):
    log = AuditLog(tree.parent / "audit.log")
    base = snapshot_baseline(tree)
    (tree / "proj" / "data" / "member-files" / "late.csv").write_bytes(b"l")
    os.chmod(tree / "proj" / "data", 0o777)
    os.chown(tree / "proj" / "data", 99, 99)
    findings = diff_baseline(base, tree, frozen=True, data_dirs=[tree / "proj" / "data"],
                             audit=log, project_id="proj")
    assert kinds(findings) == [("data", "FrozenTreeModified"), ("late.csv", "FrozenTreeModified")]
    assert all(f.severity is Severity.ALERT for f in findings)
    data_note = next(f.note for f in findings if f.path.endswith("data"))
    assert "WrongMode" in data_note and "WrongOwner" in data_note and "WrongGroup" in data_note
    assert [e.action for e in log] == [AuditAction.FROZEN_ACCESS_ATTEMPT] * 2


def test_unchanged_tree_diffs_clean(tree):
    base = snapshot_baseline(tree)
    assert diff_baseline(base) == []
    assert diff_baseline(base, frozen=True) == []
