import os
import shutil
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from airlock.access import (REASON_FROZEN, REASON_JOB_NOT_PENDING, REASON_NOT_MEMBER, REASON_NOT_STEWARD,
                            REASON_PROJECT_MISMATCH, AccessControl, AccessDecision, FreezeReceipt)
from airlock.audit import AuditAction, AuditLog
from airlock.errors import (AlreadyFrozen, FrozenProject, NonUsPerson, NotAuthorized, NotFrozen,
                            ReceiptMismatch, UnknownPrincipal, UnknownProject)
from airlock.model import PROJECT_ROLES, Principal, Role, ZoneLayout
from airlock.transfer import JobState, TransferDirection, TransferJob

from conftest import write_tree

ADMIN = Principal("root", "Root", True, frozenset({Role.SYSTEM_ADMIN}))


def make_access(base: Path, **kw) -> AccessControl:
    layout = ZoneLayout(base / "sftp", base / "inside", base / "state")
    layout.ensure()
    return AccessControl(layout, AuditLog(layout.audit_log_path), **kw)


@pytest.fixture
def access(tmp_path):
    ac = make_access(tmp_path, service_owner_id=os.geteuid())
    for p in (ADMIN, Principal("eco", "Eco", True), Principal("alice", "Alice", True),
              Principal("steve", "Steve", True), Principal("fred", "Foreign", False)):
        ac.register_principal(p)
    data = tmp_path / "data"
    write_tree(data, {"raw/a.csv": b"a", "results/r.txt": b"r"})
    ac.create_project(ADMIN, "p1", "Project One", data)
    ac.set_membership(ADMIN, "p1", "eco", {Role.ECO_ADMIN, Role.MEMBER})
    ac.set_membership(ADMIN, "p1", "alice", {Role.MEMBER})
    ac.set_membership(ADMIN, "p1", "steve", {Role.MEMBER, Role.DATA_STEWARD})
    return ac


def egress_job(project="p1", state=JobState.DETECTED, user="alice"):
    return TransferJob("j1", user, project, TransferDirection.EGRESS, (), state, datetime.now(timezone.utc))


def test_access_decision_invariant():
    with pytest.raises(ValueError):
        AccessDecision(True, "why")
    with pytest.raises(ValueError):
        AccessDecision(False)


def test_only_system_admin_creates_projects(access, tmp_path):
    with pytest.raises(NotAuthorized):
        access.create_project(access.principals.get("eco"), "p2", "P2", tmp_path / "d2")
    with pytest.raises(ValueError):
        access.create_project(ADMIN, "p1", "again", tmp_path / "d")
    with pytest.raises(ValueError):
        access.create_project(ADMIN, "../escape", "bad", tmp_path / "d")


def test_membership_changes_are_audited_with_actor(access):
    eco = access.principals.get("eco")
    updated = access.set_membership(eco, "p1", "alice", {Role.MEMBER, Role.DATA_STEWARD})
    assert updated.roles_of("alice") == {Role.MEMBER, Role.DATA_STEWARD}
    ev = access.last_event
    assert ev.action is AuditAction.MEMBERSHIP_CHANGED and ev.actor == "eco"
    assert ev.detail == {"subject": "alice", "roles": "DataSteward,Member", "previous": "Member"}
    access.set_membership(eco, "p1", "alice", ())
    assert "alice" not in access.store.load("p1").members


def test_membership_error_precedence(access):
    alice = access.principals.get("alice")
    with pytest.raises(NotAuthorized):
        access.set_membership(alice, "p1", "fred", {Role.MEMBER})
    with pytest.raises(NonUsPerson):
        access.set_membership(ADMIN, "p1", "fred", {Role.MEMBER})
    access.set_membership(ADMIN, "p1", "fred", ())  # removing roles needs no attestation
    access.freeze_project(ADMIN, "p1")
    with pytest.raises(NotAuthorized):
        access.set_membership(alice, "p1", "fred", {Role.MEMBER})
    with pytest.raises(FrozenProject):
        access.set_membership(ADMIN, "p1", "fred", {Role.MEMBER})
    with pytest.raises(ValueError):
        access.set_membership(ADMIN, "p1", "alice", {Role.SYSTEM_ADMIN})
    with pytest.raises(UnknownPrincipal):
        access.principals.get("nobody")
    with pytest.raises(UnknownProject):
        access.store.load("p404")


def test_effective_access(access):
    p = access.store.load("p1")
    assert access.effective_access(p, "alice").allowed
    assert access.effective_access(p, "stranger").reason == REASON_NOT_MEMBER
    assert access.effective_access(p, "root").allowed


@pytest.mark.parametrize("actor, job, reason", [
    ("alice", egress_job(), REASON_NOT_STEWARD),
    ("steve", egress_job(project="p2"), REASON_PROJECT_MISMATCH),
    ("steve", egress_job(state=JobState.PROMOTED), REASON_JOB_NOT_PENDING),
    ("root", egress_job(), REASON_NOT_STEWARD),  # administrators do not approve data release
])
def test_egress_denials(access, actor, job, reason):
    decision = access.authorize_egress(access.principals.get(actor), "p1", job)
    assert not decision.allowed and decision.reason == reason
    assert access.last_event.action is AuditAction.EGRESS_DENIED
    assert access.last_event.detail["reason"] == reason
    assert not access.approvals.is_granted("j1")


def test_egress_approval_is_recorded_after_its_event(access):
    decision = access.authorize_egress(access.principals.get("steve"), "p1", egress_job())
    assert decision.allowed
    ev = access.last_event
    assert ev.action is AuditAction.EGRESS_AUTHORIZED and ev.actor == "steve"
    assert access.approvals.approver("j1") == "steve"


def test_self_approval_is_allowed_and_flagged(access):
    access.authorize_egress(access.principals.get("steve"), "p1", egress_job(user="steve"))
    assert access.last_event.detail["self_approval"] == "true"


def test_frozen_project_denies_egress_first(access):
    access.freeze_project(ADMIN, "p1")
    decision = access.authorize_egress(access.principals.get("steve"), "p1", egress_job(project="other"))
    assert decision.reason == REASON_FROZEN


def test_egress_requires_egress_job(access):
    job = TransferJob("j9", "alice", "p1", TransferDirection.INGRESS, (), JobState.DETECTED,
                      datetime.now(timezone.utc))
    with pytest.raises(ValueError):
        access.authorize_egress(access.principals.get("steve"), "p1", job)


def test_freeze_locks_tree_and_restore_puts_it_back(access, tmp_path):
    data = tmp_path / "data"
    os.chmod(data / "raw", 0o2770)
    os.chmod(data / "raw/a.csv", 0o664)
    before = {p: os.lstat(p).st_mode for p in [data, data / "raw", data / "raw/a.csv"]}
    seen = []
    access.on_frozen = seen.append
    receipt = access.freeze_project(access.principals.get("eco"), "p1")
    assert [p.project_id for p in seen] == ["p1"]
    assert os.lstat(data / "raw").st_mode & 0o7777 == 0o700
    assert os.lstat(data / "raw/a.csv").st_mode & 0o7777 == 0o600
    assert access.store.load("p1").frozen
    assert receipt.prior_membership["alice"] == {Role.MEMBER}
    assert access.load_receipt("p1") == receipt
    assert access.effective_access(access.store.load("p1"), "eco").reason == REASON_FROZEN
    with pytest.raises(AlreadyFrozen):
        access.freeze_project(ADMIN, "p1")

    restored = access.restore_project(access.principals.get("eco"), receipt)
    assert restored.members == access.store.load("p1").members
    assert dict(restored.members) == dict(receipt.prior_membership)
    assert {p: os.lstat(p).st_mode for p in before} == before
    assert access.load_receipt("p1") is None
    assert list((access.receipt_dir / "restored").iterdir())
    with pytest.raises(NotFrozen):
        access.restore_project(ADMIN, receipt)


def test_restore_rejects_foreign_or_stale_receipts(access, tmp_path):
    receipt = access.freeze_project(ADMIN, "p1")
    other = FreezeReceipt("p1", datetime(2000, 1, 1, tzinfo=timezone.utc), {}, ())
    with pytest.raises(ReceiptMismatch):
        access.restore_project(ADMIN, other)
    with pytest.raises(ReceiptMismatch):
        access.restore_project(ADMIN, receipt, project_id="p2")
    with pytest.raises(NotAuthorized):
        access.restore_project(access.principals.get("alice"), receipt)


def test_freeze_and_restore_require_eco(access):
    with pytest.raises(NotAuthorized):
        access.freeze_project(access.principals.get("steve"), "p1")


def test_receipt_round_trip(access):
    receipt = access.freeze_project(ADMIN, "p1")
    text = access.receipt_path("p1").read_text()
    assert FreezeReceipt.loads(text) == receipt
    assert FreezeReceipt.loads(text).status == "frozen"


# -- state machine against a dict model -------------------------------------------------

PEOPLE = ["eco", "alice", "steve", "fred"]
US_PERSON = {"eco": True, "alice": True, "steve": True, "fred": False}
ROLE_SETS = [frozenset()] + [frozenset({r}) for r in PROJECT_ROLES] + [frozenset(PROJECT_ROLES)]


class MembershipMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.base = Path(tempfile.mkdtemp())
        self.ac = make_access(self.base)
        self.ac.register_principal(ADMIN)
        for pid in PEOPLE:
            self.ac.register_principal(Principal(pid, pid, US_PERSON[pid]))
        write_tree(self.base / "data", {"x/y.txt": b"y"})
        self.ac.create_project(ADMIN, "p", "P", self.base / "data")
        self.ac.set_membership(ADMIN, "p", "eco", {Role.ECO_ADMIN})
        self.members = {"eco": frozenset({Role.ECO_ADMIN})}
        self.frozen = False
        self.receipt = None
        self.prior = None

    def teardown(self):
        shutil.rmtree(self.base, ignore_errors=True)

    def actor(self, name):
        return ADMIN if name == "root" else self.ac.principals.get(name)

    def is_eco(self, name):
        return name == "root" or Role.ECO_ADMIN in self.members.get(name, frozenset())

    @rule(actor=st.sampled_from(["root"] + PEOPLE), subject=st.sampled_from(PEOPLE),
          roles=st.sampled_from(ROLE_SETS))
    def set_membership(self, actor, subject, roles):
        if not self.is_eco(actor):
            expected = NotAuthorized
        elif self.frozen:
            expected = FrozenProject
        elif roles and not US_PERSON[subject]:
            expected = NonUsPerson
        else:
            expected = None
        if expected is not None:
            with pytest.raises(expected):
                self.ac.set_membership(self.actor(actor), "p", subject, roles)
            return
        self.ac.set_membership(self.actor(actor), "p", subject, roles)
        if roles:
            self.members[subject] = roles
        else:
            self.members.pop(subject, None)

    @rule(actor=st.sampled_from(["root"] + PEOPLE))
    def freeze(self, actor):
        if not self.is_eco(actor):
            with pytest.raises(NotAuthorized):
                self.ac.freeze_project(self.actor(actor), "p")
        elif self.frozen:
            with pytest.raises(AlreadyFrozen):
                self.ac.freeze_project(self.actor(actor), "p")
        else:
            self.receipt = self.ac.freeze_project(self.actor(actor), "p")
            self.prior = dict(self.members)
            self.frozen = True

    @rule(actor=st.sampled_from(["root"] + PEOPLE))
    def restore(self, actor):
        receipt = self.receipt or FreezeReceipt("p", datetime.now(timezone.utc), {}, ())
        was_eco = self.prior is not None and Role.ECO_ADMIN in self.prior.get(actor, frozenset())
        if not (self.is_eco(actor) or (self.frozen and was_eco)):
            with pytest.raises(NotAuthorized):
                self.ac.restore_project(self.actor(actor), receipt)
        elif not self.frozen:
            with pytest.raises(NotFrozen):
                self.ac.restore_project(self.actor(actor), receipt)
        else:
            self.ac.restore_project(self.actor(actor), receipt)
            self.members = dict(self.prior)
            self.frozen = False
            self.receipt = self.prior = None

    @invariant()
    def store_matches_model(self):
        project = self.ac.store.load("p")
        assert dict(project.members) == self.members
        assert project.frozen == self.frozen
        for pid in PEOPLE + ["outsider"]:
            decision = self.ac.effective_access(project, pid)
            if self.frozen:
                assert decision.reason == REASON_FROZEN
            else:
                assert decision.allowed == (pid in self.members)
        assert self.ac.effective_access(project, "root").allowed


MembershipMachine.TestCase.settings = settings(max_examples=60, stateful_step_count=25, deadline=None)
TestMembershipStateMachine = MembershipMachine.TestCase
