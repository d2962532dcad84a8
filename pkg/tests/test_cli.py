import os
import signal
import subprocess
import sys
import time

import pytest

from airlock.cli import main
from airlock.fsutil import file_lock
from airlock.model import ZoneLayout
from airlock.scanner import EICAR


@pytest.fixture
def deploy(tmp_path, monkeypatch):
    roots = {name: tmp_path / name for name in ("sftp", "inside", "state", "home")}
    for path in roots.values():
        path.mkdir()
    conf = tmp_path / "airlock.conf"
    conf.write_text(f"sftp_root={roots['sftp']}\ninside_root={roots['inside']}\nstate_root={roots['state']}\n"
                    f"home_root={roots['home']}\n")
    monkeypatch.setenv("AIRLOCK_CONFIG", str(conf))
    monkeypatch.delenv("AIRLOCK_ACTOR", raising=False)
    roots["conf"] = conf
    return roots


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def porcelain(out):
    return [dict(field.split("=", 1) for field in line.split("\t")) for line in out.splitlines()]


def bootstrap(capsys, deploy):
    assert run(capsys, "principal", "add", "root", "--us-person", "--system-admin")[0] == 0
    for user in ("alice", "steve"):
        assert run(capsys, "principal", "add", user, "--us-person")[0] == 0
    data = deploy["inside"] / "projects" / "p1"
    assert run(capsys, "--actor", "root", "project", "add", "p1", "--data-root", str(data))[0] == 0
    assert run(capsys, "project", "member", "p1", "alice", "--roles", "Member", "--actor", "root")[0] == 0
    assert run(capsys, "project", "member", "p1", "steve", "--roles", "Member,DataSteward", "--actor", "root")[0] == 0
    return data


def drop(deploy, zone, user, files):
    base = deploy["sftp" if zone.endswith("outside") else "inside"] / zone / user
    base.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (base / name).write_bytes(data)
    (base / ".transfer-ready").write_bytes(b"")


def test_ingress_and_approved_egress(capsys, deploy):
    bootstrap(capsys, deploy)
    drop(deploy, "inbox-outside", "alice", {"a.txt": b"hello", "bad.bin": EICAR})
    drop(deploy, "outbox-inside", "alice", {"result.csv": b"1,2"})

    code, out, _ = run(capsys, "--porcelain", "run-once")
    assert code == 0
    summary = porcelain(out)[-1]
    assert summary["files_quarantined"] == "2" and summary["files_promoted"] == "0"
    assert not (deploy["inside"] / "inbox-inside" / "alice" / "a.txt").exists()

    code, out, _ = run(capsys, "--porcelain", "egress", "list")
    (pending,) = porcelain(out)
    assert pending["approved"] == "false" and pending["user"] == "alice"

    code, out, _ = run(capsys, "egress", "approve", pending["job_id"], "--actor", "alice")
    assert code == 1 and "denied" in out
    code, out, _ = run(capsys, "egress", "approve", pending["job_id"], "--actor", "steve")
    assert code == 0 and "audit seq" in out

    assert run(capsys, "run-once")[0] == 0
    assert (deploy["sftp"] / "outbox-outside" / "alice" / "result.csv").read_bytes() == b"1,2"

    code, out, _ = run(capsys, "--porcelain", "audit", "query", "--action", "EgressDenied")
    assert [r["actor"] for r in porcelain(out)] == ["alice"]
    code, out, _ = run(capsys, "audit", "verify")
    assert code == 0 and "intact" in out


def test_freeze_restore_and_sentinel(capsys, deploy):
    data = bootstrap(capsys, deploy)
    data.mkdir(parents=True)
    (data / "x.csv").write_bytes(b"x")
    assert run(capsys, "project", "member", "p1", "root", "--roles", "EcoAdmin", "--actor", "root")[0] == 0
    code, out, _ = run(capsys, "project", "freeze", "p1", "--actor", "root")
    assert code == 0 and "frozen" in out
    assert run(capsys, "sentinel", "check", "p1")[0] == 0
    (data / "sneaky.csv").write_bytes(b"s")
    code, out, _ = run(capsys, "--porcelain", "sentinel", "check", "p1")
    assert code == 1
    assert any(r.get("kind") == "FrozenTreeModified" for r in porcelain(out))
    os.unlink(data / "sneaky.csv")
    code, out, _ = run(capsys, "project", "restore", "p1", "--actor", "root")
    assert code == 0 and "restored" in out
    code, out, _ = run(capsys, "--porcelain", "project", "list")
    assert porcelain(out)[0]["state"] == "Active"


def test_sessions_from_the_cli(capsys, deploy, tmp_path):
    image = tmp_path / "golden.img"
    image.write_bytes(b"img")
    (deploy["home"] / "alice").mkdir(mode=0o700)
    code, out, _ = run(capsys, "--porcelain", "session", "open", "--user", "alice", "--golden-image", str(image))
    assert code == 0
    sid = porcelain(out)[0]["session_id"]
    code, out, _ = run(capsys, "session", "list")
    assert sid in out
    assert run(capsys, "session", "close", sid)[0] == 0
    code, _, err = run(capsys, "session", "close", sid)
    assert code == 1 and "no such session" in err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["project", "freeze", "p1"],  # no actor
    ["audit", "query", "--since", "yesterday"],
    ["session", "open", "--user", "alice"],  # no golden image configured
])
def test_usage_errors_exit_2(capsys, deploy, argv):
    assert run(capsys, *argv)[0] == 2


def test_config_errors_exit_2(capsys, deploy, tmp_path, monkeypatch):
    monkeypatch.delenv("AIRLOCK_CONFIG")
    assert run(capsys, "status")[0] == 2
    bad = tmp_path / "bad.conf"
    bad.write_text("sftp_root=/x\nnonsense=1\n")
    code, _, err = run(capsys, "--config", str(bad), "status")
    assert code == 2 and "line 2" in err


def test_unknown_actor_is_an_operational_error(capsys, deploy):
    code, _, err = run(capsys, "project", "freeze", "p1", "--actor", "nobody")
    assert code == 1 and "nobody" in err


def test_second_engine_gets_lock_held(capsys, deploy):
    layout = ZoneLayout(deploy["sftp"], deploy["inside"], deploy["state"])
    with file_lock(layout.engine_lock_path, blocking=False, write_pid=True):
        proc = subprocess.run([sys.executable, "-m", "airlock", "run-once"], capture_output=True, text=True,
                              env=dict(os.environ), timeout=60)
        assert proc.returncode == 3, proc.stderr
        assert str(os.getpid()) in proc.stderr
        code, out, _ = run(capsys, "status")
        assert code == 0 and f"held by pid {os.getpid()}" in out


def test_daemon_stops_cleanly_on_sigterm(deploy):
    proc = subprocess.Popen([sys.executable, "-m", "airlock", "run"], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, env=dict(os.environ))
    lock = deploy["state"] / "engine.lock"
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        if lock.exists() and lock.read_text().strip() == str(proc.pid):
            break
        time.sleep(0.05)
    else:
        proc.kill()
        pytest.fail("daemon never took the engine lock")
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(timeout=30) == 0
