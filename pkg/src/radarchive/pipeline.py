"""Load raw files into a repository branch: full ingest and incremental appends."""

from __future__ import annotations

import logging
from pathlib import Path

from .chunkstore import DEFAULT_POLICY, ChunkPolicy, append_volumes, store_tree
from .errors import ConflictError, DuplicateTimeError, InvalidArgumentError, StaleBaseError, UnknownBranchError
from .ingest import read_rdt_file, scan_archive_dir
from .model import DEFAULT_N_RAYS, build_tree
from .txn import Conflict, ConflictReport, Repository

log = logging.getLogger(__name__)


def ensure_branch(repo: Repository, branch: str) -> None:
    """Create ``branch`` at the root snapshot if it does not exist yet."""
    try:
        repo.head(branch)
    except UnknownBranchError:
        repo.create_branch(branch)


def ingest_paths(repo: Repository, paths, branch: str, message: str, author: str, timestamp,
                 policy: ChunkPolicy = DEFAULT_POLICY, n_rays: int = DEFAULT_N_RAYS) -> str:
    """Load the volumes in ``paths`` (time ordered) into ``branch`` as one commit.

    Each VCP group present in the input is rebuilt from the input alone, so
    re-ingesting the same files reproduces the same manifest. Volumes are
    decoded ``policy.time`` at a time to bound memory.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise InvalidArgumentError("no input files")
    ensure_branch(repo, branch)
    txn = repo.begin(branch)
    started = set()
    for i in range(0, len(paths), policy.time):
        volumes = [read_rdt_file(p) for p in paths[i:i + policy.time]]
        fresh = [v for v in volumes if v.vcp_name not in started]
        rest = [v for v in volumes if v.vcp_name in started]
        if fresh:
            store_tree(txn, build_tree(fresh, n_rays), policy)
            started.update(v.vcp_name for v in fresh)
        if rest:
            append_volumes(txn, rest, policy, n_rays)
    return txn.commit(message, author, timestamp)


def ingest_directory(repo: Repository, directory, branch: str, message: str, author: str, timestamp,
                     policy: ChunkPolicy = DEFAULT_POLICY, n_rays: int = DEFAULT_N_RAYS) -> str:
    entries = scan_archive_dir(directory)
    if not entries:
        raise InvalidArgumentError(f"no valid .rdt files in {directory}")
    return ingest_paths(repo, [p for _, p in entries], branch, message, author, timestamp, policy, n_rays)


def _duplicate_report(exc: DuplicateTimeError, volumes) -> ConflictReport:
    groups = sorted({v.vcp_name for v in volumes})
    return ConflictReport([Conflict(g, "time-range-overlap", str(exc)) for g in groups])


def append_paths(repo: Repository, paths, branch: str, message: str, author: str, timestamp,
                 policy: ChunkPolicy = DEFAULT_POLICY, n_rays: int = DEFAULT_N_RAYS,
                 max_attempts: int = 16) -> str:
    """Append the volumes in ``paths`` to ``branch`` in one commit.

    When another writer moves the branch first, the change is rebased if it
    does not interfere with theirs, and otherwise re-executed on the new
    head. A volume whose time is already present raises
    :class:`ConflictError` with a time-range-overlap report.
    """
    volumes = [read_rdt_file(p) for p in paths]
    if not volumes:
        raise InvalidArgumentError("no input files")
    volumes.sort(key=lambda v: v.time_ns)
    ensure_branch(repo, branch)
    last = None
    for attempt in range(max(1, int(max_attempts))):
        txn = repo.begin(branch)
        try:
            append_volumes(txn, volumes, policy, n_rays)
        except DuplicateTimeError as exc:
            raise ConflictError(f"append rejected: {exc}", _duplicate_report(exc, volumes)) from None
        try:
            return txn.commit(message, author, timestamp)
        except StaleBaseError as exc:
            last = exc
            if not exc.report:
                try:
                    txn.rebase()
                    return txn.commit(message, author, timestamp)
                except (StaleBaseError, ConflictError) as again:
                    last = again
            log.info("append to %s: attempt %d hit a moved branch, re-executing", branch, attempt + 1)
    raise ConflictError(f"append to {branch!r} still conflicting after {max_attempts} attempts",
                        getattr(last, "report", ConflictReport()))

