"""``airlock`` command line.

Exit statuses: 0 success, 1 operational error, 2 usage or configuration
error, 3 lock contention. Mutating commands print the seq of the audit event
they produced. ``--porcelain`` switches every command to one
``field=value`` record per line.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

from . import records
from .audit import AuditAction, AuditEvent
from .config import CONFIG_ENV, load_config
from .control import EXIT_ERROR, EXIT_LOCKED, EXIT_OK, EXIT_USAGE, Deployment, run_daemon, run_once
from .errors import AirlockError, ConfigError, LockHeld, UnknownPrincipal
from .fsutil import file_lock, read_lock_holder
from .model import Principal, Role
from .sentinel import save_baseline, snapshot_baseline
from .sessions import SessionSpec
from .transfer import TransferDirection


class UsageError(Exception):
    pass


class Output:
    def __init__(self, porcelain: bool, stream=None) -> None:
        self.porcelain = porcelain
        self.stream = stream or sys.stdout

    def record(self, human: str, **fields) -> None:
        if self.porcelain:
            self.stream.write("\t".join(f"{k}={records.escape(str(v))}" for k, v in fields.items()) + "\n")
        else:
            self.stream.write(human + "\n")

    def event(self, event: AuditEvent | None) -> None:
        if event is not None:
            self.record(f"audit seq {event.seq} ({event.action.value})", audit_seq=event.seq,
                        action=event.action.value)


def _actor(dep: Deployment, args) -> Principal:
    actor_id = args.actor or os.environ.get("AIRLOCK_ACTOR")
    if not actor_id:
        raise UsageError("--actor is required for this command")
    return dep.access.principals.get(actor_id)


def _ts(text: str | None) -> datetime | None:
    if text is None:
        return None
    try:
        return records.parse_ts(text)
    except ValueError:
        raise UsageError(f"not an RFC 3339 timestamp with zone: {text}") from None


# -- command handlers -------------------------------------------------------------


def cmd_run(dep, args, out) -> int:
    return run_daemon(dep, args.direction)


def cmd_run_once(dep, args, out) -> int:
    status, report, sentinel = run_once(dep, args.direction)
    for job_id, state in report.jobs:
        out.record(f"job {job_id} {state.value}", job_id=job_id, state=state.value)
    out.record(f"{len(report.jobs)} jobs, {report.files_promoted} files promoted, "
               f"{report.files_quarantined} quarantined, {sentinel.alerts} sentinel alerts",
               jobs=len(report.jobs), files_promoted=report.files_promoted,
               files_quarantined=report.files_quarantined, alerts=sentinel.alerts)
    for err in report.errors:
        out.record(f"error: {err}", error=err)
    return status


def cmd_principal_add(dep, args, out) -> int:
    roles = frozenset({Role.SYSTEM_ADMIN}) if args.system_admin else frozenset()
    p = Principal(args.principal_id, args.name or args.principal_id, args.us_person, roles)
    dep.access.register_principal(p, actor=args.actor or "system")
    out.record(f"principal {p.id} registered", principal=p.id)
    out.event(dep.access.last_event)
    return EXIT_OK


def cmd_project_add(dep, args, out) -> int:
    project = dep.access.create_project(_actor(dep, args), args.project_id, args.name or args.project_id,
                                        Path(args.data_root))
    out.record(f"project {project.project_id} created at {project.data_root}",
               project=project.project_id, data_root=project.data_root)
    out.event(dep.access.last_event)
    return EXIT_OK


def cmd_project_member(dep, args, out) -> int:
    roles = Role.parse_set(args.roles or "")
    project = dep.access.set_membership(_actor(dep, args), args.project_id, args.subject, roles)
    out.record(f"{args.subject} on {project.project_id}: {Role.format_set(project.roles_of(args.subject)) or '(removed)'}",
               project=project.project_id, subject=args.subject,
               roles=Role.format_set(project.roles_of(args.subject)))
    out.event(dep.access.last_event)
    return EXIT_OK


def cmd_project_freeze(dep, args, out) -> int:
    actor = _actor(dep, args)
    with file_lock(dep.layout.cycle_lock_path):
        receipt = dep.access.freeze_project(actor, args.project_id)
    event = dep.audit.query(action=AuditAction.PROJECT_FROZEN, project_id=args.project_id)[-1]
    out.record(f"project {receipt.project_id} frozen ({len(receipt.prior_modes)} paths recorded)",
               project=receipt.project_id, entries=len(receipt.prior_modes))
    out.event(event)
    return EXIT_OK


def cmd_project_restore(dep, args, out) -> int:
    actor = _actor(dep, args)
    receipt = dep.access.load_receipt(args.project_id)
    if receipt is None:
        out.record(f"no freeze receipt for {args.project_id}", error="no-receipt", project=args.project_id)
        return EXIT_ERROR
    with file_lock(dep.layout.cycle_lock_path):
        project = dep.access.restore_project(actor, receipt, args.project_id)
    out.record(f"project {project.project_id} restored", project=project.project_id)
    out.event(dep.access.last_event)
    return EXIT_OK


def cmd_project_list(dep, args, out) -> int:
    for p in dep.access.store.all():
        out.record(f"{p.project_id}\t{p.access_state.value}\t{len(p.members)} members\t{p.data_root}",
                   project=p.project_id, state=p.access_state.value, members=len(p.members),
                   data_root=p.data_root)
    return EXIT_OK


def cmd_egress_list(dep, args, out) -> int:
    for job in dep.engine.pending_jobs():
        if job.direction is not TransferDirection.EGRESS:
            continue
        approved = dep.access.approvals.is_granted(job.job_id)
        out.record(f"{job.job_id}\t{job.user}\t{job.project_id or '-'}\t{len(job.payload)} files\t"
                   f"{'approved' if approved else 'awaiting approval'}",
                   job_id=job.job_id, user=job.user, project=job.project_id,
                   files=len(job.payload), approved=str(approved).lower())
    return EXIT_OK


def cmd_egress_approve(dep, args, out) -> int:
    actor = _actor(dep, args)
    try:
        job = dep.engine.journal.load(args.job_id)
    except KeyError:
        out.record(f"no such job: {args.job_id}", error="unknown-job", job_id=args.job_id)
        return EXIT_ERROR
    if job.direction is not TransferDirection.EGRESS:
        raise UsageError(f"{args.job_id} is not an egress job")
    project = args.project or job.project_id
    if not project:
        raise UsageError("job has no project; pass --project")
    decision = dep.access.authorize_egress(actor, project, job)
    if decision.allowed:
        out.record(f"egress {job.job_id} approved by {actor.id}", job_id=job.job_id, allowed="true")
    else:
        out.record(f"egress {job.job_id} denied: {decision.reason}", job_id=job.job_id, allowed="false",
                   reason=decision.reason)
    out.event(dep.access.last_event)
    return EXIT_OK if decision.allowed else EXIT_ERROR


def cmd_audit_verify(dep, args, out) -> int:
    bad = dep.audit.verify()
    if bad is None:
        out.record("audit chain intact", ok="true")
        return EXIT_OK
    out.record(f"audit chain broken at seq {bad}", ok="false", first_bad_seq=bad)
    return EXIT_ERROR


def cmd_audit_query(dep, args, out) -> int:
    detail = {}
    if args.job_id:
        detail["job_id"] = args.job_id
    if args.session_id:
        detail["session_id"] = args.session_id
    events = dep.audit.query(project_id=args.project, actor=args.actor_filter,
                             action=AuditAction(args.action) if args.action else None,
                             since=_ts(args.since), until=_ts(args.until), detail=detail)
    for ev in events:
        pairs = " ".join(f"{k}={v}" for k, v in sorted(ev.detail.items()))
        out.record(f"{ev.seq}\t{records.format_ts(ev.timestamp)}\t{ev.actor}\t{ev.project_id or '-'}\t"
                   f"{ev.action.value}\t{pairs}",
                   seq=ev.seq, timestamp=records.format_ts(ev.timestamp), actor=ev.actor,
                   project=ev.project_id or "", action=ev.action.value,
                   **{f"detail.{k}": v for k, v in sorted(ev.detail.items())})
    return EXIT_OK


def cmd_sentinel_baseline(dep, args, out) -> int:
    project = dep.access.store.load(args.project_id)
    baseline = snapshot_baseline(project.data_root)
    path = save_baseline(dep.layout.state_root, project.project_id, baseline)
    out.record(f"baseline of {len(baseline.entries)} entries written to {path}",
               project=project.project_id, entries=len(baseline.entries), path=path)
    return EXIT_OK


def cmd_sentinel_check(dep, args, out) -> int:
    report = dep.sentinel_pass([args.project_id] if args.project_id else None)
    for pid, findings in sorted(report.findings.items()):
        for f in findings:
            out.record(f"{pid}\t{f.severity.value}\t{f.describe()}\t{f.path}" + (f"\t{f.note}" if f.note else ""),
                       project=pid, severity=f.severity.value, kind=f.kind.value, path=f.path,
                       detail=f.describe(), note=f.note)
    out.record(f"{report.alerts} alerts", alerts=report.alerts)
    return EXIT_ERROR if report.alerts else EXIT_OK


def cmd_session_open(dep, args, out) -> int:
    image = Path(args.golden_image) if args.golden_image else dep.config.golden_image
    if image is None:
        raise UsageError("no golden image: pass --golden-image or set golden_image in the config")
    spec = SessionSpec(args.user, image, args.memory_mb, args.cores)
    handle = dep.broker.open_session(spec, owner_pid=args.owner_pid or os.getppid())
    out.record(f"session {handle.session_id} open for {spec.user} ({spec.memory_mb} MB, {spec.cpu_cores} cores)",
               session_id=handle.session_id, user=spec.user, overlay=handle.overlay_path,
               share=handle.share_path, memory_mb=spec.memory_mb, cpu_cores=spec.cpu_cores)
    out.event(dep.broker.last_event)
    return EXIT_OK


def cmd_session_close(dep, args, out) -> int:
    handle = dep.broker.close_session(args.session_id)
    out.record(f"session {handle.session_id} closed", session_id=handle.session_id, state=handle.state.value)
    out.event(dep.broker.last_event)
    return EXIT_OK


def cmd_session_reap(dep, args, out) -> int:
    count = dep.broker.reap_orphans()
    out.record(f"{count} orphaned sessions reaped", reaped=count)
    if count:
        out.event(dep.broker.last_event)
    return EXIT_OK


def cmd_session_list(dep, args, out) -> int:
    for h in dep.broker.sessions():
        out.record(f"{h.session_id}\t{h.spec.user}\t{h.state.value}\t{records.format_ts(h.opened_at)}",
                   session_id=h.session_id, user=h.spec.user, state=h.state.value,
                   opened_at=records.format_ts(h.opened_at), owner_pid=h.owner_pid or "")
    return EXIT_OK


def cmd_status(dep, args, out) -> int:
    holder = read_lock_holder(dep.layout.engine_lock_path)
    out.record(f"engine lock: {'held by pid ' + holder if holder else 'free'}", engine_lock=holder or "free")
    pending = dep.engine.pending_jobs()
    out.record(f"pending jobs: {len(pending)}", pending_jobs=len(pending))
    for p in dep.access.store.all():
        out.record(f"project {p.project_id}: {p.access_state.value}", project=p.project_id,
                   state=p.access_state.value)
    out.record(f"open sessions: {len(dep.broker.sessions())}", open_sessions=len(dep.broker.sessions()))
    bad = dep.audit.verify()
    out.record(f"audit chain: {'intact' if bad is None else f'broken at seq {bad}'}",
               audit_ok=str(bad is None).lower(), **({} if bad is None else {"first_bad_seq": bad}))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global options with SUPPRESS defaults so a value
    # given before the subcommand is not overwritten by the subparser's default.
    opts = argparse.ArgumentParser(add_help=False)
    default = {"default": argparse.SUPPRESS} if suppress else {}
    opts.add_argument("--config", help=f"config file (default: ${CONFIG_ENV})", **default)
    opts.add_argument("--porcelain", action="store_true", help="one field=value record per line", **default)
    opts.add_argument("--actor", help="principal performing the action (default: $AIRLOCK_ACTOR)", **default)
    return opts


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    parser = argparse.ArgumentParser(prog="airlock", parents=[_global_options(suppress=False)],
                                     description="Secure data airlock and compliance control plane.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(subparsers, name, handler, **kw):
        p = subparsers.add_parser(name, parents=[common], **kw)
        p.set_defaults(handler=handler)
        return p

    for name, handler, help_ in (("run", cmd_run, "run the polling daemon"),
                                 ("run-once", cmd_run_once, "run one cycle and exit")):
        p = add(sub, name, handler, help=help_)
        p.add_argument("--direction", choices=[d.value for d in TransferDirection])

    principal = sub.add_parser("principal", help="register principals").add_subparsers(dest="sub", required=True)
    p = add(principal, "add", cmd_principal_add)
    p.add_argument("principal_id")
    p.add_argument("--name")
    p.add_argument("--us-person", action="store_true")
    p.add_argument("--system-admin", action="store_true")

    project = sub.add_parser("project", help="projects, membership, freeze/restore").add_subparsers(
        dest="sub", required=True)
    p = add(project, "add", cmd_project_add)
    p.add_argument("project_id")
    p.add_argument("--name")
    p.add_argument("--data-root", required=True)
    p = add(project, "member", cmd_project_member)
    p.add_argument("project_id")
    p.add_argument("subject")
    p.add_argument("--roles", default="", help="comma-separated roles; empty removes the member")
    for name, handler in (("freeze", cmd_project_freeze), ("restore", cmd_project_restore)):
        add(project, name, handler).add_argument("project_id")
    add(project, "list", cmd_project_list)

    egress = sub.add_parser("egress", help="egress approvals").add_subparsers(dest="sub", required=True)
    p = add(egress, "approve", cmd_egress_approve)
    p.add_argument("job_id")
    p.add_argument("--project", help="project to authorize against (default: the job's)")
    add(egress, "list", cmd_egress_list)

    audit = sub.add_parser("audit", help="audit log").add_subparsers(dest="sub", required=True)
    add(audit, "verify", cmd_audit_verify)
    p = add(audit, "query", cmd_audit_query)
    p.add_argument("--project")
    p.add_argument("--by", dest="actor_filter", help="only events by this actor")
    p.add_argument("--action", choices=[a.value for a in AuditAction])
    p.add_argument("--since")
    p.add_argument("--until")
    p.add_argument("--job-id")
    p.add_argument("--session-id")

    sentinel = sub.add_parser("sentinel", help="permission sentinel").add_subparsers(dest="sub", required=True)
    add(sentinel, "baseline", cmd_sentinel_baseline).add_argument("project_id")
    add(sentinel, "check", cmd_sentinel_check).add_argument("project_id", nargs="?")

    session = sub.add_parser("session", help="virtual sessions").add_subparsers(dest="sub", required=True)
    p = add(session, "open", cmd_session_open)
    p.add_argument("--user", required=True)
    p.add_argument("--golden-image")
    p.add_argument("--memory-mb", type=int, default=SessionSpec.__dataclass_fields__["memory_mb"].default)
    p.add_argument("--cores", type=int, default=SessionSpec.__dataclass_fields__["cpu_cores"].default)
    p.add_argument("--owner-pid", type=int, help="process whose exit orphans the session (default: parent)")
    add(session, "close", cmd_session_close).add_argument("session_id")
    add(session, "reap", cmd_session_reap)
    add(session, "list", cmd_session_list)

    add(sub, "status", cmd_status)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    out = Output(args.porcelain)
    config_path = args.config or os.environ.get(CONFIG_ENV)
    try:
        if not config_path:
            raise UsageError(f"no config: pass --config or set {CONFIG_ENV}")
        dep = Deployment(load_config(config_path))
        return args.handler(dep, args, out)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"airlock: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LockHeld as exc:
        print(f"airlock: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (AirlockError, OSError) as exc:
        print(f"airlock: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
