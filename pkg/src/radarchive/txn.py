"""Snapshots, branches and optimistic transactions over the chunk store.

Repository layout::

    objects/<2 hex>/<64 hex>   chunk frames and manifest documents
    snapshots/<id>.json        snapshot documents
    refs/<branch>              head snapshot id, 64 hex characters + newline
    wal/<id>.json              commit intents awaiting their ref update
    session.lock               shared by every open handle; recovery needs it exclusively

Commit protocol: write the manifest object and snapshot document, write a
durable intent record to ``wal/``, then under the branch lock compare the
ref against the transaction's base and atomically rename a new ref into
place. The rename is the linearization point. Recovery drops every intent
whose ref move did not happen; the objects it left behind are unreferenced
and harmless. Temporaries and intents of live writers are never touched:
cleanup only runs when no other handle holds the session lock, and the
operating system drops the lock of a process that dies.
"""

from __future__ import annotations

import datetime as _dt
import fcntl
import json
import logging
import re
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .chunkstore import (
    DirectoryObjectStore,
    Manifest,
    ManifestView,
    StagingArea,
    atomic_write,
    canonical_json,
    fsync_dir,
    object_id,
)
from .errors import (
    ConflictError,
    CorruptRepositoryError,
    InvalidArgumentError,
    InvalidRollbackError,
    SimulatedCrash,
    StaleBaseError,
    TransactionStateError,
    UnknownBranchError,
    UnknownSnapshotError,
)

log = logging.getLogger(__name__)

ROOT_PARENT = "0" * 64
DEFAULT_BRANCH = "main"
SESSION_LOCK = "session.lock"
_BRANCH_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_SNAPSHOT_RE = re.compile(r"^[0-9a-f]{64}$")


def format_timestamp(ts) -> str:
    """Canonical UTC rendering of a commit timestamp (microsecond precision)."""
    if isinstance(ts, str):
        text = ts.strip().replace("z", "Z")
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        ts = _dt.datetime.fromisoformat(text)
    if not isinstance(ts, _dt.datetime):
        raise InvalidArgumentError(f"cannot interpret {ts!r} as a commit timestamp")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=_dt.timezone.utc)
    return ts.astimezone(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def snapshot_id(parent: str, manifest_hash: str, message: str, author: str, timestamp: str) -> str:
    doc = {"author": author, "manifest": manifest_hash, "message": message,
           "parent": parent, "timestamp": timestamp}
    return object_id(canonical_json(doc))


@dataclass(frozen=True)
class Snapshot:
    id: str
    parent: str
    manifest: str
    message: str
    author: str
    timestamp: str

    def to_json(self) -> dict:
        return {"id": self.id, "parent": self.parent, "manifest": self.manifest,
                "message": self.message, "author": self.author, "timestamp": self.timestamp}

    @classmethod
    def from_json(cls, doc: dict) -> "Snapshot":
        snap = cls(doc["id"], doc["parent"], doc["manifest"], doc["message"], doc["author"], doc["timestamp"])
        if snapshot_id(snap.parent, snap.manifest, snap.message, snap.author, snap.timestamp) != snap.id:
            raise CorruptRepositoryError(f"snapshot {snap.id} does not hash to its id")
        return snap

    @property
    def is_root(self) -> bool:
        return self.parent == ROOT_PARENT


# --- deltas and conflicts --------------------------------------------------------------------

@dataclass(frozen=True)
class Conflict:
    path: str
    kind: str  # chunk-overlap | metadata-divergence | time-range-overlap
    detail: str


@dataclass
class ConflictReport:
    conflicts: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.conflicts)

    def __len__(self) -> int:
        return len(self.conflicts)

    def __iter__(self):
        return iter(self.conflicts)

    def kinds(self) -> set:
        return {c.kind for c in self.conflicts}

    def to_json(self) -> list:
        return [{"path": c.path, "kind": c.kind, "detail": c.detail} for c in self.conflicts]


_DELETED = None


@dataclass
class ManifestDelta:
    """Changes turning the manifest with hash ``base`` into another manifest.

    ``None`` values mark deletions. ``time_appends`` maps a VCP group to the
    volume times (ns) the change adds to it.
    """

    base: str
    chunks: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    time_appends: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.chunks or self.arrays or self.groups)

    def apply(self, manifest: Manifest) -> Manifest:
        out = manifest.copy()
        for path, attrs in self.groups.items():
            if attrs is _DELETED:
                out.groups.pop(path, None)
            else:
                out.groups[path] = dict(attrs)
        for path, meta in self.arrays.items():
            if meta is _DELETED:
                out.arrays.pop(path, None)
                out.chunks.pop(path, None)
            else:
                out.arrays[path] = meta
        for (path, key), ref in self.chunks.items():
            if path not in out.arrays:
                continue
            refs = out.chunks.setdefault(path, {})
            if ref is _DELETED:
                refs.pop(key, None)
            else:
                refs[key] = ref
        return out


def _time_values(view: Optional[ManifestView], path: str) -> np.ndarray:
    if view is None or path not in view.manifest.arrays:
        return np.empty(0, dtype=np.int64)
    return view.read(path).astype(np.int64)


def diff_manifests(base: Manifest, new: Manifest, base_view: Optional[ManifestView] = None,
                   new_view: Optional[ManifestView] = None) -> ManifestDelta:
    """Delta from ``base`` to ``new``; time appends are derived when views are given."""
    delta = ManifestDelta(base=base.hash)
    for path in set(base.groups) | set(new.groups):
        a, b = base.groups.get(path, _DELETED), new.groups.get(path, _DELETED)
        if a != b:
            delta.groups[path] = b
    for path in set(base.arrays) | set(new.arrays):
        a, b = base.arrays.get(path), new.arrays.get(path)
        if a != b:
            delta.arrays[path] = b
        old_refs = base.chunks.get(path, {})
        new_refs = new.chunks.get(path, {}) if b is not None else {}
        for key in set(old_refs) | set(new_refs):
            if old_refs.get(key) != new_refs.get(key):
                delta.chunks[(path, key)] = new_refs.get(key)
    if new_view is not None:
        for path in delta.arrays:
            if path.count("/") == 1 and path.endswith("/time"):
                added = np.setdiff1d(_time_values(new_view, path), _time_values(base_view, path))
                if added.size:
                    delta.time_appends[path.rsplit("/", 1)[0]] = [int(t) for t in added]
    return delta


def detect_conflict(base: Manifest, delta_a: ManifestDelta, delta_b: ManifestDelta) -> ConflictReport:
    """Report how two deltas made against ``base`` interfere.

    * chunk-overlap: both write the same chunk key;
    * metadata-divergence: both rewrite the same metadata document differently;
    * time-range-overlap: both add volumes to one VCP group over intersecting
      (closed) time intervals.
    """
    h = base.hash
    if delta_a.base != h or delta_b.base != h:
        raise InvalidArgumentError("deltas were not made against the given base manifest")
    report = ConflictReport()
    for path, key in sorted(set(delta_a.chunks) & set(delta_b.chunks)):
        report.conflicts.append(Conflict(path, "chunk-overlap", f"both write chunk {key}"))
    for kind, a_docs, b_docs in (("array", delta_a.arrays, delta_b.arrays), ("group", delta_a.groups, delta_b.groups)):
        for path in sorted(set(a_docs) & set(b_docs)):
            if a_docs[path] != b_docs[path]:
                report.conflicts.append(Conflict(path, "metadata-divergence", f"{kind} metadata rewritten differently"))
    for group in sorted(set(delta_a.time_appends) & set(delta_b.time_appends)):
        a, b = delta_a.time_appends[group], delta_b.time_appends[group]
        lo, hi = max(min(a), min(b)), min(max(a), max(b))
        if lo <= hi:
            report.conflicts.append(Conflict(
                group, "time-range-overlap",
                f"appended time ranges intersect over [{np.datetime64(lo, 'ns')}, {np.datetime64(hi, 'ns')}]",
            ))
    return report


# --- fault injection ----------------------------------------------------------------------------

class FaultInjector:
    """Counts persistence steps and raises :class:`SimulatedCrash` at step ``crash_at``.

    With ``crash_at=None`` it only records the step labels, which is how a
    test enumerates the injection points of an operation.
    """

    def __init__(self, crash_at: Optional[int] = None):
        self.crash_at = crash_at
        self.steps: list = []

    def __call__(self, label: str) -> None:
        self.steps.append(label)
        if self.crash_at is not None and len(self.steps) - 1 == self.crash_at:
            raise SimulatedCrash(f"injected crash at step {self.crash_at} ({label})")


def _no_fault(label: str) -> None:
    return None


# --- repository ------------------------------------------------------------------------------------

class SnapshotHandle(ManifestView):
    """Read handle pinned to one snapshot; reads never change afterwards."""

    def __init__(self, snapshot: Snapshot, manifest: Manifest, objects):
        super().__init__(manifest, objects)
        self.snapshot = snapshot

    @property
    def id(self) -> str:
        return self.snapshot.id


class Repository:
    """A directory holding content-addressed objects, snapshots and branch refs."""

    def __init__(self, path, *, fsync: bool = True, fault: Callable[[str], None] = _no_fault):
        self.path = Path(path)
        self.fsync = fsync
        self.fault = fault
        self.objects = DirectoryObjectStore(self.path, fsync=fsync, checkpoint=self._checkpoint)
        self._session = None

    def _checkpoint(self, label: str) -> None:
        try:
            self.fault(label)
        except SimulatedCrash:
            # a crashed process loses its locks with it
            self.close()
            raise

    def _lock_session(self, exclusive: bool) -> bool:
        """Hold the session lock shared, or try to take it exclusively; returns whether that worked."""
        if self._session is None:
            self._session = open(self.path / SESSION_LOCK, "a+b")
        fd = self._session.fileno()
        if not exclusive:
            fcntl.flock(fd, fcntl.LOCK_SH)
            return True
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            return True
        except BlockingIOError:
            fcntl.flock(fd, fcntl.LOCK_SH)
            return False

    def close(self) -> None:
        """Release the session lock; the handle must not write afterwards."""
        if self._session is not None:
            self._session.close()
            self._session = None

    def __enter__(self) -> "Repository":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # construction -------------------------------------------------------------------------
    @classmethod
    def init(cls, path, *, fsync: bool = True, branch: str = DEFAULT_BRANCH) -> "Repository":
        path = Path(path)
        if (path / "refs").exists():
            raise InvalidArgumentError(f"{path} already holds a repository")
        for sub in ("objects", "snapshots", "refs", "wal"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        repo = cls(path, fsync=fsync)
        root = repo._write_snapshot(ROOT_PARENT, Manifest.empty(), "initial snapshot", "", format_timestamp("1970-01-01T00:00:00Z"))
        repo._write_ref(branch, root.id)
        repo._lock_session(exclusive=False)
        return repo

    @classmethod
    def open(cls, path, *, fsync: bool = True, fault: Callable[[str], None] = _no_fault) -> "Repository":
        path = Path(path)
        if not (path / "refs").is_dir():
            raise UnknownBranchError(f"{path} is not a repository")
        repo = cls(path, fsync=fsync, fault=fault)
        repo.recover()
        return repo

    @classmethod
    def open_or_init(cls, path, **kwargs) -> "Repository":
        if (Path(path) / "refs").is_dir():
            return cls.open(path, **kwargs)
        return cls.init(path, fsync=kwargs.get("fsync", True))

    # snapshots -----------------------------------------------------------------------------------
    def _snapshot_path(self, sid: str) -> Path:
        return self.path / "snapshots" / f"{sid}.json"

    def _write_snapshot(self, parent: str, manifest: Manifest, message: str, author: str, timestamp: str) -> Snapshot:
        data = manifest.to_bytes()
        mhash = self.objects.put(data)
        sid = snapshot_id(parent, mhash, message, author, timestamp)
        snap = Snapshot(sid, parent, mhash, message, author, timestamp)
        path = self._snapshot_path(sid)
        if not path.exists():
            atomic_write(path, canonical_json(snap.to_json()), label="snapshot", fsync=self.fsync,
                         checkpoint=self._checkpoint)
        return snap

    def snapshot(self, sid: str) -> Snapshot:
        if not isinstance(sid, str) or not _SNAPSHOT_RE.match(sid):
            raise UnknownSnapshotError(f"unknown snapshot {sid!r}")
        try:
            doc = json.loads(self._snapshot_path(sid).read_bytes())
        except FileNotFoundError:
            raise UnknownSnapshotError(f"unknown snapshot {sid!r}") from None
        return Snapshot.from_json(doc)

    def manifest(self, snap: Snapshot) -> Manifest:
        return Manifest.from_bytes(self.objects.get(snap.manifest))

    def checkout(self, sid: str) -> SnapshotHandle:
        snap = self.snapshot(sid)
        return SnapshotHandle(snap, self.manifest(snap), self.objects)

    def resolve_ref(self, ref: str) -> str:
        """Snapshot id for a branch name or a (full) snapshot id."""
        if _SNAPSHOT_RE.match(ref or "") and self._snapshot_path(ref).exists():
            return ref
        return self.head(ref)

    def checkout_ref(self, ref: str) -> SnapshotHandle:
        return self.checkout(self.resolve_ref(ref))

    # refs ------------------------------------------------------------------------------------------------
    def _ref_path(self, branch: str) -> Path:
        if not isinstance(branch, str) or not _BRANCH_RE.match(branch):
            raise InvalidArgumentError(f"invalid branch name {branch!r}")
        return self.path / "refs" / branch

    def _write_ref(self, branch: str, sid: str) -> None:
        atomic_write(self._ref_path(branch), (sid + "\n").encode("ascii"), label="ref",
                     fsync=self.fsync, checkpoint=self._checkpoint)

    def head(self, branch: str = DEFAULT_BRANCH) -> str:
        try:
            text = self._ref_path(branch).read_text("ascii")
        except FileNotFoundError:
            raise UnknownBranchError(f"unknown branch {branch!r}") from None
        sid = text.strip()
        if not _SNAPSHOT_RE.match(sid) or not text.endswith("\n"):
            raise CorruptRepositoryError(f"ref {branch!r} is malformed")
        return sid

    def branches(self) -> list:
        return sorted(p.name for p in (self.path / "refs").iterdir()
                      if not p.name.startswith(".") and _BRANCH_RE.match(p.name))

    def create_branch(self, name: str, sid: Optional[str] = None) -> str:
        if self._ref_path(name).exists():
            raise InvalidArgumentError(f"branch {name!r} already exists")
        sid = sid or self.root_id()
        self.snapshot(sid)
        with self._ref_lock(name):
            self._write_ref(name, sid)
        return sid

    def delete_branch(self, name: str) -> None:
        path = self._ref_path(name)
        if not path.exists():
            raise UnknownBranchError(f"unknown branch {name!r}")
        with self._ref_lock(name):
            path.unlink()

    def root_id(self) -> str:
        return snapshot_id(ROOT_PARENT, Manifest.empty().hash, "initial snapshot", "",
                           format_timestamp("1970-01-01T00:00:00Z"))

    @contextmanager
    def _ref_lock(self, branch: str):
        lock_path = self.path / "refs" / f".{branch}.lock"
        with open(lock_path, "a+b") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    # history ---------------------------------------------------------------------------------------------
    def log(self, branch: str = DEFAULT_BRANCH) -> list:
        """Snapshots from the branch head back to the root, newest first."""
        out = []
        sid = self.head(branch)
        seen = set()
        while True:
            if sid in seen:
                raise CorruptRepositoryError("snapshot parent chain has a cycle")
            seen.add(sid)
            snap = self.snapshot(sid)
            out.append(snap)
            if snap.is_root:
                return out
            sid = snap.parent

    def is_ancestor(self, sid: str, branch: str) -> bool:
        return any(s.id == sid for s in self.log(branch))

    # transactions -------------------------------------------------------------------------------------------
    def begin(self, branch: str = DEFAULT_BRANCH) -> "Transaction":
        sid = self.head(branch)
        snap = self.snapshot(sid)
        return Transaction(self, branch, snap, self.manifest(snap))

    def rollback(self, branch: str, sid: str, message: str, author: str, timestamp) -> str:
        """Commit a new snapshot whose content equals ancestor ``sid``; history is kept."""
        target = self.snapshot(sid)
        if not self.is_ancestor(sid, branch):
            raise InvalidRollbackError(f"snapshot {sid} is not an ancestor of branch {branch!r}")
        txn = self.begin(branch)
        txn.replace_manifest(self.manifest(target))
        return txn.commit(message, author, timestamp)

    def _commit(self, txn: "Transaction", message: str, author: str, timestamp) -> str:
        ts = format_timestamp(timestamp)
        staged = txn.manifest
        # early check avoids writing a snapshot bound to lose the race
        if self.head(txn.branch) != txn.base.id:
            raise StaleBaseError("branch moved since the transaction began", txn.conflicts_with_head())
        snap = self._write_snapshot(txn.base.id, staged, message, author, ts)
        intent = {"branch": txn.branch, "expected": txn.base.id, "new": snap.id}
        wal_path = self.path / "wal" / f"{snap.id}.json"
        atomic_write(wal_path, canonical_json(intent), label="wal", fsync=self.fsync, checkpoint=self._checkpoint)
        with self._ref_lock(txn.branch):
            current = self.head(txn.branch)
            if current != txn.base.id:
                wal_path.unlink(missing_ok=True)
                raise StaleBaseError("branch moved since the transaction began", txn.conflicts_with_head())
            self._write_ref(txn.branch, snap.id)
        self._checkpoint("wal.remove")
        wal_path.unlink(missing_ok=True)
        log.info("committed %s on %s", snap.id[:12], txn.branch)
        return snap.id

    def recover(self) -> list:
        """Resolve interrupted commits; returns ``(snapshot id, outcome)`` pairs.

        Leftovers are only cleaned up when this is the sole open handle;
        otherwise they may belong to a live writer and are left alone.
        """
        outcomes = []
        try:
            if self._lock_session(exclusive=True):
                outcomes = self._clean_up()
            else:
                log.info("recovery: other sessions are open, leaving temporaries and intents alone")
        finally:
            self._lock_session(exclusive=False)
        for branch in self.branches():
            self.snapshot(self.head(branch))
        return outcomes

    def _clean_up(self) -> list:
        for sub in ("snapshots", "refs", "wal"):
            for tmp in (self.path / sub).glob(".*.tmp"):
                tmp.unlink(missing_ok=True)
        self.objects.remove_temporaries()
        outcomes = []
        for intent_path in sorted((self.path / "wal").glob("*.json")):
            intent = json.loads(intent_path.read_bytes())
            try:
                current = self.head(intent["branch"])
            except UnknownBranchError:
                current = None
            outcome = "committed" if current == intent["new"] else "aborted"
            log.info("recovery: intent %s %s", intent["new"][:12], outcome)
            intent_path.unlink()
            outcomes.append((intent["new"], outcome))
        if outcomes and self.fsync:
            fsync_dir(self.path / "wal")
        return outcomes


class Transaction(StagingArea):
    """Staged changes against one base snapshot of one branch.

    Reads see the base plus this transaction's own writes, never concurrent
    commits. Commit succeeds only if the branch still points at the base;
    otherwise :class:`StaleBaseError` carries a :class:`ConflictReport` and
    the caller may :meth:`rebase` (when clean) and commit again.
    """

    def __init__(self, repo: Repository, branch: str, base: Snapshot, base_manifest: Manifest):
        super().__init__(base_manifest, repo.objects)
        self.repo = repo
        self.branch = branch
        self.base = base
        self.base_manifest = base_manifest
        self.state = "open"

    def _require_open(self) -> None:
        if self.state != "open":
            raise TransactionStateError(f"transaction is {self.state}")

    def set_group(self, path, attrs) -> None:
        self._require_open()
        super().set_group(path, attrs)

    def delete(self, path) -> None:
        self._require_open()
        super().delete(path)

    def write_array(self, path, meta, data, offset=None):
        self._require_open()
        return super().write_array(path, meta, data, offset)

    def replace_manifest(self, manifest: Manifest) -> None:
        self._require_open()
        self.manifest = manifest.copy()

    def delta(self) -> ManifestDelta:
        base_view = ManifestView(self.base_manifest, self.objects)
        return diff_manifests(self.base_manifest, self.manifest, base_view, self)

    def conflicts_with_head(self) -> ConflictReport:
        head = self.repo.snapshot(self.repo.head(self.branch))
        head_manifest = self.repo.manifest(head)
        base_view = ManifestView(self.base_manifest, self.objects)
        theirs = diff_manifests(self.base_manifest, head_manifest, base_view, ManifestView(head_manifest, self.objects))
        return detect_conflict(self.base_manifest, theirs, self.delta())

    def rebase(self) -> None:
        """Move onto the current branch head, replaying this transaction's delta.

        Raises :class:`ConflictError` if the changes overlap.
        """
        self._require_open()
        report = self.conflicts_with_head()
        if report:
            raise ConflictError("changes conflict with the branch head", report)
        mine = self.delta()
        head = self.repo.snapshot(self.repo.head(self.branch))
        head_manifest = self.repo.manifest(head)
        self.manifest = mine.apply(head_manifest)
        self.base = head
        self.base_manifest = head_manifest

    def commit(self, message: str, author: str, timestamp) -> str:
        self._require_open()
        sid = self.repo._commit(self, message, author, timestamp)
        self.state = "committed"
        return sid

    def abort(self) -> None:
        self._require_open()
        self.state = "aborted"


def commit(txn: Transaction, message: str, author: str, timestamp) -> str:
    return txn.commit(message, author, timestamp)


def begin(repo: Repository, branch: str = DEFAULT_BRANCH) -> Transaction:
    return repo.begin(branch)


def checkout(repo: Repository, sid: str) -> SnapshotHandle:
    return repo.checkout(sid)
