"""Brute-force reference models used as test oracles.

Nothing here imports the package's implementation modules: each model is
written directly from the rules it checks, on plain dicts and ``os`` calls.
"""

from __future__ import annotations

import hashlib
import os
import stat
from collections import Counter
from pathlib import Path

FLAG = ".transfer-ready"

# The standard antivirus test string, assembled so this file is not itself a hit.
TEST_VIRUS = (b"X5O!P%@AP[4\\PZX54(P^)7CC)7}$" + b"EICAR" + b"-STANDARD-ANTIVIRUS-TEST-FILE!$H+H*")

ZONES = {
    "ingress": ("inbox-outside", "inbox-inside"),
    "egress": ("outbox-inside", "outbox-outside"),
}


def is_infected(data: bytes) -> bool:
    return TEST_VIRUS in data


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- transfers ---------------------------------------------------------------------
#
# The world is a dict from logical path to bytes. Logical paths are
# "<zone>/<user>/<relpath>" for the four zone directories and
# "quarantine/JOB:<user>/<relpath>" for quarantined batches.


def _free(world: dict, path: str) -> str:
    if path not in world:
        return path
    n = 1
    while f"{path}.{n}" in world:
        n += 1
    return f"{path}.{n}"


def reference_transfer(world: dict[str, bytes], direction: str,
                       approved=lambda user: True) -> dict[str, bytes]:
    """The terminal state after the engine has driven every flagged batch to completion.

    A flagged batch with any infected file goes to quarantine as a whole,
    otherwise the whole batch is promoted, renaming on collision with the
    smallest free ``.N`` suffix. Egress batches move only when ``approved``;
    unapproved or not, every flag is consumed.
    """
    source, dest = ZONES[direction]
    out = dict(world)
    users = sorted({p.split("/")[1] for p in world if p.startswith(source + "/")})
    for user in users:
        prefix = f"{source}/{user}/"
        if prefix + FLAG not in out:
            continue
        del out[prefix + FLAG]
        batch = sorted(p[len(prefix):] for p in out if p.startswith(prefix))
        if not batch:
            continue
        if direction == "egress" and not approved(user):
            continue
        infected = any(is_infected(out[prefix + rel]) for rel in batch)
        for rel in batch:
            data = out.pop(prefix + rel)
            target = f"quarantine/JOB:{user}/{rel}" if infected else _free(out, f"{dest}/{user}/{rel}")
            out[target] = data
    return out


def multiset(world: dict[str, bytes]) -> Counter:
    return Counter((path, sha(data)) for path, data in world.items())


# -- permission sentinel -------------------------------------------------------------


def brute_force_findings(root: Path, top_dirs, data_dirs, group: int, owner: int) -> set[tuple]:
    """Every policy violation under ``root`` as (path, kind, actual, expected) tuples."""
    top_dirs = [Path(p) for p in top_dirs]
    data_dirs = [Path(p) for p in data_dirs]
    if not top_dirs and not data_dirs:
        return set()
    everything: dict[Path, os.stat_result] = {}
    if os.path.lexists(root):
        everything[Path(root)] = os.lstat(root)
        for dirpath, dirnames, filenames in os.walk(root):
            for name in dirnames + filenames:
                p = Path(dirpath) / name
                everything[p] = os.lstat(p)

    def stat_of(p: Path):
        if p in everything:
            return everything[p]
        return os.lstat(p) if os.path.lexists(p) else None

    found = set()
    named = set(top_dirs) | set(data_dirs)
    ancestors = {a for p in named for a in p.parents}
    for top in top_dirs:
        st = stat_of(top)
        if st is None:
            found.add((str(top), "Unreadable", None, None))
            continue
        if st.st_uid != owner:
            found.add((str(top), "WrongOwner", st.st_uid, owner))
        if st.st_gid != group:
            found.add((str(top), "WrongGroup", st.st_gid, group))
        if st.st_mode & 0o7777 != 0o750:
            found.add((str(top), "WrongMode", st.st_mode & 0o7777, 0o750))
    for data in data_dirs:
        st = stat_of(data)
        if st is None:
            found.add((str(data), "Unreadable", None, None))
        elif st.st_gid != group:
            found.add((str(data), "WrongGroup", st.st_gid, group))
    for p, st in everything.items():
        if p.parent in top_dirs and p not in named and p not in ancestors:
            found.add((str(p), "UnexpectedTopLevelEntry", None, None))
        if not stat.S_ISLNK(st.st_mode) and st.st_mode & 0o002:
            found.add((str(p), "WorldWritable", None, None))
    return found
