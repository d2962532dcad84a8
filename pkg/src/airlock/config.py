"""Daemon configuration: strict ``key=value`` file with documented defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidValue, ParseError
from .model import ZoneLayout
from .scanner import DEFAULT_TIMEOUT_S
from .sentinel import DEFAULT_SENTINEL_INTERVAL_S
from .transfer import DEFAULT_POLL_INTERVAL_S

CONFIG_ENV = "AIRLOCK_CONFIG"
BUILTIN_SCANNER = "builtin"


@dataclass(frozen=True)
class Config:
    layout: ZoneLayout
    poll_interval_s: int = DEFAULT_POLL_INTERVAL_S
    sentinel_interval_s: int = DEFAULT_SENTINEL_INTERVAL_S
    scanner: str = BUILTIN_SCANNER
    scan_timeout_s: int = int(DEFAULT_TIMEOUT_S)
    service_owner_id: int = 0
    signature_file: Path | None = None
    policy_file: Path | None = None
    home_root: Path = Path("/home")
    golden_image: Path | None = None
    session_exec_hook: str | None = None


_REQUIRED = ("sftp_root", "inside_root", "state_root")
_INTS = {"poll_interval_s": 1, "sentinel_interval_s": 1, "scan_timeout_s": 1, "service_owner_id": 0}
_PATHS = {"signature_file", "policy_file", "home_root", "golden_image"}
_STRINGS = {"scanner", "session_exec_hook"}
KNOWN_KEYS = frozenset(_REQUIRED) | frozenset(_INTS) | _PATHS | _STRINGS


def _abs_path(key: str, value: str) -> Path:
    path = Path(value)
    if not path.is_absolute():
        raise InvalidValue(key, "path must be absolute")
    return path


def parse_config(text: str) -> Config:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(lineno, "expected key=value")
        if key not in KNOWN_KEYS:
            raise ParseError(lineno, f"unknown key {key!r}")
        if key in values:
            raise ParseError(lineno, f"duplicate key {key!r}")
        values[key] = value

    for key in _REQUIRED:
        if key not in values:
            raise InvalidValue(key, "required")
    kwargs: dict = {"layout": ZoneLayout(*(_abs_path(k, values.pop(k)) for k in _REQUIRED))}
    kwargs["service_owner_id"] = os.geteuid()
    for key, value in values.items():
        if key in _INTS:
            try:
                number = int(value)
            except ValueError:
                raise InvalidValue(key, "not an integer") from None
            if number < _INTS[key]:
                raise InvalidValue(key, f"must be >= {_INTS[key]}")
            kwargs[key] = number
        elif key in _PATHS:
            kwargs[key] = _abs_path(key, value)
        elif key == "scanner":
            if value != BUILTIN_SCANNER and "{file}" not in value:
                raise InvalidValue(key, "expected 'builtin' or a command template containing {file}")
            kwargs[key] = value
        else:
            kwargs[key] = value or None
    return Config(**kwargs)


def load_config(path: Path | str) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidValue("config", f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_config(text)
