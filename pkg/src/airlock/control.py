"""Wiring of every component from a :class:`Config`, plus the run loops."""

from __future__ import annotations

import logging
import signal
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

from .access import AccessControl
from .audit import AuditLog
from .config import BUILTIN_SCANNER, Config
from .errors import UnknownProject
from .fsutil import file_lock
from .model import ProjectRecord, validate_layout
from .scanner import CommandScanner, SignatureScanner
from .sentinel import Finding, audit_tree, diff_baseline, load_baseline, parse_policy_file
from .sessions import SessionBroker
from .transfer import CycleReport, TransferDirection, TransferEngine

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_LOCKED = 3


@dataclass
class SentinelReport:
    findings: dict[str, list[Finding]] = field(default_factory=dict)

    @property
    def alerts(self) -> int:
        return sum(1 for fs in self.findings.values() for f in fs if f.severity.value == "Alert")


class Deployment:
    """All services for one zone layout, built from configuration."""

    def __init__(self, config: Config) -> None:
        self.config = config
        self.layout = config.layout
        self.audit = AuditLog(self.layout.audit_log_path)
        if config.scanner == BUILTIN_SCANNER:
            self.scanner = SignatureScanner.from_file(config.signature_file)
        else:
            self.scanner = CommandScanner(config.scanner, timeout=config.scan_timeout_s)
        self.access = AccessControl(self.layout, self.audit, service_owner_id=config.service_owner_id,
                                    on_frozen=self._close_sessions_of)
        self.engine = TransferEngine(self.layout, self.scanner, self.audit,
                                     approvals=self.access.approvals, project_resolver=self._project_of)
        self._broker: SessionBroker | None = None

    @property
    def broker(self) -> SessionBroker:
        if self._broker is None:
            self._broker = SessionBroker(self.layout, self.audit, home_root=self.config.home_root,
                                         exec_hook=self.config.session_exec_hook)
        return self._broker

    def _project_of(self, user: str) -> str | None:
        mine = [p.project_id for p in self.access.store.all() if p.roles_of(user)]
        return mine[0] if len(mine) == 1 else None

    def _close_sessions_of(self, project: ProjectRecord) -> None:
        # Extrapolated policy: members lose their open sessions when the project freezes.
        for member in project.members:
            self.broker.close_user_sessions(member, reason=f"project-frozen:{project.project_id}")

    def policies(self):
        if self.config.policy_file is None or not self.config.policy_file.is_file():
            return {}
        return parse_policy_file(self.config.policy_file)

    def sentinel_pass(self, project_ids: Iterable[str] | None = None) -> SentinelReport:
        """Audit every Active project's tree and diff every baselined tree."""
        policies = self.policies()
        report = SentinelReport()
        projects = self.access.store.all()
        if project_ids is not None:
            wanted = set(project_ids)
            missing = wanted - {p.project_id for p in projects}
            if missing:
                raise UnknownProject(sorted(missing)[0])
            projects = [p for p in projects if p.project_id in wanted]
        for project in projects:
            policy = policies.get(project.project_id)
            found: list[Finding] = []
            if policy is not None and not project.frozen:
                found += audit_tree(policy, project.data_root, self.audit)
            baseline = load_baseline(self.layout.state_root, project.project_id)
            if baseline is not None:
                found += diff_baseline(baseline, project.data_root, project.frozen,
                                       data_dirs=policy.data_dirs if policy else (),
                                       audit=self.audit, project_id=project.project_id)
            report.findings[project.project_id] = found
        return report


def _directions(direction: str | None) -> tuple[TransferDirection, ...]:
    if direction is None:
        return tuple(TransferDirection)
    return (TransferDirection(direction),)


def run_once(deployment: Deployment, direction: str | None = None) -> tuple[int, CycleReport, SentinelReport]:
    """One transfer cycle per direction and one sentinel pass under the engine lock."""
    layout = deployment.layout
    validate_layout(layout)
    layout.ensure()
    with file_lock(layout.engine_lock_path, blocking=False, write_pid=True):
        with file_lock(layout.cycle_lock_path):
            deployment.access.recover_incomplete()
            report = deployment.engine.run_cycle(_directions(direction))
        sentinel = deployment.sentinel_pass()
        deployment.broker.reap_orphans()
    return (EXIT_ERROR if report.errors else EXIT_OK), report, sentinel


def run_daemon(deployment: Deployment, direction: str | None = None,
               stop: threading.Event | None = None, install_signals: bool = True) -> int:
    """Cycle on the configured intervals until ``stop`` is set or SIGTERM/SIGINT arrives.

    A signal only sets the stop flag, so the job in flight finishes (or stays
    journaled) before the loop exits.
    """
    stop = stop or threading.Event()
    if install_signals:
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda signum, frame: stop.set())
    layout = deployment.layout
    cfg = deployment.config
    validate_layout(layout)
    layout.ensure()
    with file_lock(layout.engine_lock_path, blocking=False, write_pid=True):
        next_sentinel = 0.0
        while not stop.is_set():
            started = time.monotonic()
            with file_lock(layout.cycle_lock_path):
                deployment.access.recover_incomplete()
                report = deployment.engine.run_cycle(_directions(direction), should_stop=stop.is_set)
            for err in report.errors:
                log.error("cycle: %s", err)
            log.info("cycle: %d jobs, %d promoted, %d quarantined", len(report.jobs),
                     report.files_promoted, report.files_quarantined)
            if stop.is_set():
                break
            if started >= next_sentinel:
                sentinel = deployment.sentinel_pass()
                deployment.broker.reap_orphans()
                log.info("sentinel: %d alerts", sentinel.alerts)
                next_sentinel = started + cfg.sentinel_interval_s
            stop.wait(max(0.0, cfg.poll_interval_s - (time.monotonic() - started)))
    return EXIT_OK

