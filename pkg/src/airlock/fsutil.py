"""Filesystem helpers: digests, cross-device moves, advisory locks."""

from __future__ import annotations

import errno
import fcntl
import hashlib
import os
import shutil
import stat
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from .errors import LockHeld

CHUNK = 1 << 20


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(CHUNK), b""):
            h.update(block)
    return h.hexdigest()


def digest_tree(root: Path, exclude: frozenset[Path] | set[Path] = frozenset()) -> dict[str, str]:
    """Map every entry under ``root`` to a digest of its type, mode and content.

    Entries listed in ``exclude`` (absolute paths) are skipped along with their
    subtrees. Used to prove a directory tree was left untouched.
    """
    root = Path(root)
    excluded = {Path(p) for p in exclude}
    out: dict[str, str] = {}

    def visit(path: Path) -> None:
        if path in excluded:
            return
        st = os.lstat(path)
        rel = path.relative_to(root).as_posix()
        mode = stat.S_IMODE(st.st_mode)
        if stat.S_ISDIR(st.st_mode):
            out[rel] = f"dir:{mode:o}"
            for child in sorted(os.listdir(path)):
                visit(path / child)
        elif stat.S_ISLNK(st.st_mode):
            out[rel] = f"link:{os.readlink(path)}"
        elif stat.S_ISREG(st.st_mode):
            out[rel] = f"file:{mode:o}:{sha256_file(path)}"
        else:
            out[rel] = f"other:{stat.S_IFMT(st.st_mode)}"

    if root.exists():
        visit(root)
    return out


def relocate(src: Path, dst: Path) -> None:
    """Move ``src`` to ``dst``; across devices, copy then unlink the source.

    ``dst`` must not exist. On the cross-device path a crash can leave a
    partial or complete copy at ``dst`` while ``src`` is still intact; callers
    treat the source as authoritative in that case.
    """
    dst.parent.mkdir(parents=True, exist_ok=True)
    try:
        os.rename(src, dst)
        return
    except OSError as exc:
        if exc.errno != errno.EXDEV:
            raise
    shutil.copy2(src, dst, follow_symlinks=False)
    fd = os.open(dst, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)
    os.unlink(src)


def prune_empty_dirs(start: Path, stop: Path) -> None:
    """Remove empty directories from ``start`` upward, never removing ``stop``."""
    start, stop = Path(start), Path(stop)
    cur = start
    while cur != stop and stop in cur.parents:
        try:
            cur.rmdir()
        except OSError:
            return
        cur = cur.parent


def read_lock_holder(path: Path) -> str:
    try:
        return Path(path).read_text().strip()
    except OSError:
        return ""


@contextmanager
def file_lock(path: Path, *, blocking: bool = True, write_pid: bool = False) -> Iterator[int]:
    """Hold an exclusive ``flock`` on ``path`` for the duration of the block.

    With ``blocking=False`` a held lock raises :class:`LockHeld`. With
    ``write_pid`` the holder's pid is written into the file as decimal text.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
    acquired = False
    try:
        flags = fcntl.LOCK_EX | (0 if blocking else fcntl.LOCK_NB)
        try:
            fcntl.flock(fd, flags)
        except BlockingIOError:
            raise LockHeld(path, read_lock_holder(path)) from None
        acquired = True
        if write_pid:
            os.ftruncate(fd, 0)
            os.pwrite(fd, f"{os.getpid()}\n".encode(), 0)
            os.fsync(fd)
        yield fd
    finally:
        # A losing contender must not wipe the holder's pid.
        if write_pid and acquired:
            try:
                os.ftruncate(fd, 0)
            except OSError:
                pass
        os.close(fd)
