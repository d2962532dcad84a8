"""Exception hierarchy shared by every airlock module."""

from __future__ import annotations


class AirlockError(Exception):
    """Base class for all airlock failures."""


class IoFailure(AirlockError):
    def __init__(self, path, reason: str = "") -> None:
        self.path = str(path)
        self.reason = reason
        super().__init__(f"I/O failure on {self.path}: {reason}" if reason else f"I/O failure on {self.path}")


# -- layout ------------------------------------------------------------------

class LayoutError(AirlockError):
    pass


class MissingRoot(LayoutError):
    def __init__(self, path) -> None:
        self.path = str(path)
        super().__init__(f"zone root missing or not a directory: {self.path}")


class OverlappingRoots(LayoutError):
    def __init__(self, a, b) -> None:
        self.a, self.b = str(a), str(b)
        super().__init__(f"zone roots overlap: {self.a} and {self.b}")


# -- transfers ---------------------------------------------------------------

class ScannerUnavailable(AirlockError):
    """The scan backend could not produce a verdict; the job must be retried."""


class JournalCorrupt(AirlockError):
    def __init__(self, job_id: str, reason: str = "") -> None:
        self.job_id = job_id
        super().__init__(f"journal record {job_id} is corrupt: {reason}")


class InvalidTransition(AirlockError):
    pass


class EgressNotApproved(AirlockError):
    def __init__(self, job_id: str) -> None:
        self.job_id = job_id
        super().__init__(f"egress job {job_id} has no recorded approval")


# -- audit -------------------------------------------------------------------

class AuditError(AirlockError):
    """The audit log could not be appended to. Callers must treat this as fatal."""


# -- access control ----------------------------------------------------------

class AccessError(AirlockError):
    pass


class NotAuthorized(AccessError):
    def __init__(self, actor: str, action: str = "") -> None:
        self.actor = actor
        super().__init__(f"{actor} is not authorized to {action or 'perform this action'}")


class NonUsPerson(AccessError):
    def __init__(self, subject: str) -> None:
        self.subject = subject
        super().__init__(f"{subject} is not attested as a US person and cannot hold project roles")


class FrozenProject(AccessError):
    def __init__(self, project_id: str) -> None:
        self.project_id = project_id
        super().__init__(f"project {project_id} is frozen")


class AlreadyFrozen(AccessError):
    def __init__(self, project_id: str) -> None:
        self.project_id = project_id
        super().__init__(f"project {project_id} is already frozen")


class NotFrozen(AccessError):
    def __init__(self, project_id: str) -> None:
        self.project_id = project_id
        super().__init__(f"project {project_id} is not frozen")


class ReceiptMismatch(AccessError):
    pass


class UnknownProject(AccessError):
    def __init__(self, project_id: str) -> None:
        self.project_id = project_id
        super().__init__(f"no such project: {project_id}")


class UnknownPrincipal(AccessError):
    def __init__(self, principal_id: str) -> None:
        self.principal_id = principal_id
        super().__init__(f"no such principal: {principal_id}")


# -- sessions ----------------------------------------------------------------

class SessionError(AirlockError):
    pass


class SessionAlreadyOpen(SessionError):
    def __init__(self, user: str) -> None:
        self.user = user
        super().__init__(f"user {user} already has an open session")


class MissingGoldenImage(SessionError):
    def __init__(self, path) -> None:
        self.path = str(path)
        super().__init__(f"golden image not found: {self.path}")


class InsecureHomeShare(SessionError):
    def __init__(self, path, reason: str) -> None:
        self.path = str(path)
        super().__init__(f"home share {self.path} rejected: {reason}")


class UnknownSession(SessionError):
    def __init__(self, session_id: str) -> None:
        self.session_id = session_id
        super().__init__(f"no such session: {session_id}")


# -- control plane -----------------------------------------------------------

class ConfigError(AirlockError):
    pass


class ParseError(ConfigError):
    def __init__(self, line: int, message: str) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


class InvalidValue(ConfigError):
    def __init__(self, key: str, message: str = "") -> None:
        self.key = key
        super().__init__(f"invalid value for {key}" + (f": {message}" if message else ""))


class LockHeld(AirlockError):
    def __init__(self, path, holder: str = "") -> None:
        self.path = str(path)
        self.holder = holder
        super().__init__(f"lock {self.path} is held" + (f" by pid {holder}" if holder else ""))
