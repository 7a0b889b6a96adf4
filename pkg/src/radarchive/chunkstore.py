"""Chunked, compressed, content-addressed array storage beneath manifests.

A :class:`Manifest` maps every written chunk of every array to the
content hash (SHA-256 of the stored frame) of an object in an
:class:`ObjectStore`, and carries the group and array metadata documents.
Manifests serialize to canonical JSON (sorted keys, no whitespace), so a
manifest's own hash is deterministic.

Directory layout of a store::

    objects/<first-2-hex>/<sha256-hex>    chunk frames and manifest documents
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import math
import os
import struct
import uuid
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    ChunkRangeError,
    CodecError,
    CorruptFrameError,
    CorruptLayoutError,
    CorruptObjectError,
    DataTypeError,
    InvalidArgumentError,
    ObjectNotFoundError,
    PathNotFoundError,
)
from .model import (
    COORDINATE_NAMES,
    MOMENT_ORDER,
    NAT,
    ArrayNode,
    GroupGrid,
    GroupNode,
    RadarTree,
    TreePath,
    format_ns,
    join_path,
    validate_structure,
    volume_slices,
)
from .errors import DuplicateTimeError

ROOT = ""

# --- codecs ------------------------------------------------------------------------

FRAME_MAGIC = b"RDCF"
_FRAME_HEAD = struct.Struct("<4sB")
_FRAME_TAIL = struct.Struct("<QI")


def _zlib_encode(data: bytes, params: Mapping) -> bytes:
    return zlib.compress(data, int(params.get("level", 1)))


def _zlib_decode(payload: bytes, params: Mapping) -> bytes:
    return zlib.decompress(payload)


CODECS = {
    "raw": (lambda data, params: bytes(data), lambda payload, params: bytes(payload)),
    "zlib": (_zlib_encode, _zlib_decode),
}


def _codec(codec_id: str):
    try:
        return CODECS[codec_id]
    except KeyError:
        raise CodecError(f"unknown codec {codec_id!r}") from None


def compress(codec_id: str, data: bytes, **params) -> bytes:
    """Encode ``data`` into a self-describing frame.

    Frame: ``b"RDCF"``, codec-id length (u8), codec id, uncompressed length
    (u64), CRC-32 of the payload (u32), payload.
    """
    encode, _ = _codec(codec_id)
    if "level" in params and not 0 <= int(params["level"]) <= 9:
        raise CodecError("compression level must be within 0..9")
    payload = encode(data, params)
    cid = codec_id.encode("ascii")
    return b"".join([
        _FRAME_HEAD.pack(FRAME_MAGIC, len(cid)), cid,
        _FRAME_TAIL.pack(len(data), zlib.crc32(payload)), payload,
    ])


def frame_codec(frame: bytes) -> str:
    if len(frame) < _FRAME_HEAD.size:
        raise CorruptFrameError("frame shorter than its header")
    magic, n = _FRAME_HEAD.unpack_from(frame, 0)
    if magic != FRAME_MAGIC:
        raise CorruptFrameError("bad frame magic")
    return bytes(frame[_FRAME_HEAD.size:_FRAME_HEAD.size + n]).decode("ascii", "replace")


def decompress(codec_id: Optional[str], frame: bytes) -> bytes:
    """Inverse of :func:`compress`; verifies codec id, checksum and length."""
    found = frame_codec(frame)
    start = _FRAME_HEAD.size + len(found.encode("ascii"))
    if len(frame) < start + _FRAME_TAIL.size:
        raise CorruptFrameError("frame truncated")
    if codec_id is not None and found != codec_id:
        raise CorruptFrameError(f"frame was written with codec {found!r}, not {codec_id!r}")
    _, decode = _codec(found)
    length, crc = _FRAME_TAIL.unpack_from(frame, start)
    payload = frame[start + _FRAME_TAIL.size:]
    if zlib.crc32(payload) != crc:
        raise CorruptFrameError("frame checksum mismatch")
    try:
        data = decode(payload, {})
    except zlib.error as exc:
        raise CorruptFrameError(f"payload does not decode: {exc}") from None
    if len(data) != length:
        raise CorruptFrameError(f"decoded {len(data)} bytes, frame declares {length}")
    return data


# --- object stores -------------------------------------------------------------------

def object_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ObjectStore:
    """Content-addressed blob storage: ``get(put(b)) == b`` and ``put`` is idempotent."""

    def put(self, data: bytes) -> str:
        raise NotImplementedError

    def get(self, oid: str) -> bytes:
        raise NotImplementedError

    def contains(self, oid: str) -> bool:
        raise NotImplementedError


class MemoryObjectStore(ObjectStore):
    def __init__(self):
        self._blobs: dict = {}
        self.bytes_written = 0
        self.bytes_read = 0

    def put(self, data: bytes) -> str:
        oid = object_id(data)
        if oid not in self._blobs:
            self._blobs[oid] = bytes(data)
            self.bytes_written += len(data)
        return oid

    def get(self, oid: str) -> bytes:
        try:
            data = self._blobs[oid]
        except KeyError:
            raise ObjectNotFoundError(f"object {oid} not found") from None
        self.bytes_read += len(data)
        return data

    def contains(self, oid: str) -> bool:
        return oid in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


def fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


Checkpoint = Callable[[str], None]


def _no_checkpoint(label: str) -> None:
    return None


def atomic_write(path: Path, data: bytes, *, label: str = "file", fsync: bool = True,
                 checkpoint: Checkpoint = _no_checkpoint) -> None:
    """Write ``data`` to ``path`` via a temporary file and an atomic rename.

    ``checkpoint`` is called before each persistence step with
    ``<label>.write``, ``<label>.fsync`` and ``<label>.rename``; fault
    injection raises from it. A crash at ``.write`` leaves a half-written
    temporary file behind, as a real crash would.
    """
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    with open(tmp, "wb") as fh:
        try:
            checkpoint(label + ".write")
        except BaseException:
            fh.write(data[: len(data) // 2])
            raise
        fh.write(data)
        fh.flush()
        checkpoint(label + ".fsync")
        if fsync:
            os.fsync(fh.fileno())
    checkpoint(label + ".rename")
    os.replace(tmp, path)
    if fsync:
        fsync_dir(path.parent)


class DirectoryObjectStore(ObjectStore):
    """Objects stored as ``objects/<2 hex>/<64 hex>`` below ``root``.

    Reads re-hash the blob, so a damaged object surfaces as
    :class:`CorruptObjectError` instead of wrong data.
    """

    def __init__(self, root, *, fsync: bool = True, checkpoint: Checkpoint = _no_checkpoint):
        self.root = Path(root)
        self.dir = self.root / "objects"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.checkpoint = checkpoint
        self.bytes_written = 0
        self.bytes_read = 0

    def path_of(self, oid: str) -> Path:
        return self.dir / oid[:2] / oid

    def put(self, data: bytes) -> str:
        oid = object_id(data)
        path = self.path_of(oid)
        if path.exists():
            return oid
        path.parent.mkdir(exist_ok=True)
        atomic_write(path, data, label="object", fsync=self.fsync, checkpoint=self.checkpoint)
        self.bytes_written += len(data)
        return oid

    def get(self, oid: str) -> bytes:
        try:
            data = self.path_of(oid).read_bytes()
        except FileNotFoundError:
            raise ObjectNotFoundError(f"object {oid} not found") from None
        if object_id(data) != oid:
            raise CorruptObjectError(f"object {oid} content does not match its id")
        self.bytes_read += len(data)
        return data

    def contains(self, oid: str) -> bool:
        return self.path_of(oid).exists()

    def remove_temporaries(self) -> int:
        n = 0
        for tmp in self.dir.glob("*/.*.tmp"):
            tmp.unlink(missing_ok=True)
            n += 1
        return n


# --- chunk grid ------------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkGrid:
    array_shape: tuple
    chunk_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "array_shape", tuple(int(s) for s in self.array_shape))
        object.__setattr__(self, "chunk_shape", tuple(int(c) for c in self.chunk_shape))
        if len(self.array_shape) != len(self.chunk_shape):
            raise InvalidArgumentError("array and chunk shapes differ in rank")
        if any(c < 1 for c in self.chunk_shape) or any(s < 0 for s in self.array_shape):
            raise InvalidArgumentError("chunk extents must be >= 1 and array extents >= 0")

    @property
    def grid_shape(self) -> tuple:
        return tuple(math.ceil(s / c) for s, c in zip(self.array_shape, self.chunk_shape))

    def chunk_extent(self, key: tuple) -> tuple:
        return tuple(min(c, s - k * c) for k, c, s in zip(key, self.chunk_shape, self.array_shape))

    def chunk_origin(self, key: tuple) -> tuple:
        return tuple(k * c for k, c in zip(key, self.chunk_shape))

    def check_key(self, key: tuple) -> None:
        if len(key) != len(self.array_shape) or any(not 0 <= k < g for k, g in zip(key, self.grid_shape)):
            raise ChunkRangeError(f"chunk key {key} outside grid {self.grid_shape}")

    def chunks_in(self, region: Sequence[tuple]) -> Iterator[tuple]:
        """Keys of every chunk intersecting ``region`` (per-dim ``(start, stop)``), C order."""
        ranges = []
        for (lo, hi), c in zip(region, self.chunk_shape):
            if hi <= lo:
                return
            ranges.append(range(lo // c, (hi - 1) // c + 1))
        yield from itertools.product(*ranges)

    def all_keys(self) -> Iterator[tuple]:
        return itertools.product(*(range(g) for g in self.grid_shape))


def chunk_of(grid: ChunkGrid, index: Sequence[int]) -> tuple:
    """``(grid indices, within-chunk offsets)`` of one element index."""
    index = tuple(int(i) for i in index)
    if len(index) != len(grid.array_shape) or any(
        not 0 <= i < s for i, s in zip(index, grid.array_shape)
    ):
        raise ChunkRangeError(f"index {index} outside array shape {grid.array_shape}")
    return (
        tuple(i // c for i, c in zip(index, grid.chunk_shape)),
        tuple(i % c for i, c in zip(index, grid.chunk_shape)),
    )


def key_str(key: tuple) -> str:
    return ".".join(str(k) for k in key)


def parse_key(text: str) -> tuple:
    return tuple(int(p) for p in text.split(".")) if text else ()


# --- metadata ----------------------------------------------------------------------------

DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}
DEFAULT_FILL = {"f4": 0x7FC00000, "f8": 0x7FF8000000000000, "i8": NAT & 0xFFFFFFFFFFFFFFFF}


def dtype_code(dtype) -> str:
    dtype = np.dtype(dtype).newbyteorder("<")
    for code, dt in DTYPES.items():
        if dt == dtype:
            return code
    raise DataTypeError(f"unsupported element type {dtype}")


@dataclass(frozen=True)
class ArrayMeta:
    shape: tuple
    chunks: tuple
    dtype: str
    dims: tuple
    fill_value: Optional[int] = None
    codec: str = "zlib"
    codec_params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "chunks", tuple(int(c) for c in self.chunks))
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.dtype not in DTYPES:
            raise DataTypeError(f"unsupported element type {self.dtype!r}")
        if self.fill_value is None:
            object.__setattr__(self, "fill_value", DEFAULT_FILL[self.dtype])
        if len(self.dims) != len(self.shape):
            raise InvalidArgumentError("dimension-name count must equal rank")
        if self.codec not in CODECS:
            raise CodecError(f"unknown codec {self.codec!r}")
        ChunkGrid(self.shape, self.chunks)

    @property
    def numpy_dtype(self) -> np.dtype:
        return DTYPES[self.dtype]

    @property
    def grid(self) -> ChunkGrid:
        return ChunkGrid(self.shape, self.chunks)

    def fill_scalar(self):
        bits = np.array([self.fill_value], dtype=np.uint64)
        if self.dtype == "f4":
            return np.array([self.fill_value], dtype=np.uint32).view(np.float32)[0]
        return bits.view(self.numpy_dtype)[0]

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "chunks": list(self.chunks),
            "dtype": self.dtype,
            "dims": list(self.dims),
            "fill_value": f"0x{self.fill_value:x}",
            "codec": self.codec,
            "codec_params": dict(self.codec_params),
            "attrs": dict(self.attrs),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ArrayMeta":
        return cls(
            shape=tuple(doc["shape"]), chunks=tuple(doc["chunks"]), dtype=doc["dtype"],
            dims=tuple(doc["dims"]), fill_value=int(doc["fill_value"], 16),
            codec=doc["codec"], codec_params=dict(doc["codec_params"]), attrs=dict(doc["attrs"]),
        )

    def replace(self, **changes) -> "ArrayMeta":
        doc = {f: getattr(self, f) for f in self.__dataclass_fields__}
        doc.update(changes)
        return ArrayMeta(**doc)


@dataclass(frozen=True)
class ChunkRef:
    object_id: str
    length: int
    codec: str


def canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


class Manifest:
    """Group attributes, array metadata and chunk references of one dataset version.

    Treat instances as immutable once they have been hashed; use :meth:`copy`
    before staging changes.
    """

    FORMAT = 1

    def __init__(self, groups=None, arrays=None, chunks=None):
        self.groups: dict = dict(groups or {})
        self.arrays: dict = dict(arrays or {})
        self.chunks: dict = {p: dict(c) for p, c in (chunks or {}).items()}

    @classmethod
    def empty(cls) -> "Manifest":
        return cls()

    def copy(self) -> "Manifest":
        return Manifest(copy.deepcopy(self.groups), dict(self.arrays), self.chunks)

    def to_json(self) -> dict:
        return {
            "format": self.FORMAT,
            "groups": self.groups,
            "arrays": {
                path: {
                    "meta": meta.to_json(),
                    "chunks": {
                        key_str(k): [r.object_id, r.length, r.codec]
                        for k, r in sorted(self.chunks.get(path, {}).items())
                    },
                }
                for path, meta in self.arrays.items()
            },
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_json())

    @property
    def hash(self) -> str:
        return object_id(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Manifest":
        doc = json.loads(data.decode("utf-8"))
        if doc.get("format") != cls.FORMAT:
            raise CorruptLayoutError(f"unsupported manifest format {doc.get('format')!r}")
        arrays, chunks = {}, {}
        for path, entry in doc["arrays"].items():
            arrays[path] = ArrayMeta.from_json(entry["meta"])
            chunks[path] = {
                parse_key(k): ChunkRef(v[0], int(v[1]), v[2]) for k, v in entry["chunks"].items()
            }
        return cls(doc["groups"], arrays, chunks)

    def paths(self) -> list:
        return sorted(set(self.groups) | set(self.arrays))


# --- reading ---------------------------------------------------------------------------

@dataclass
class AccessTrace:
    """Chunk objects fetched (and bytes read) while serving reads."""

    chunks_fetched: int = 0
    bytes_read: int = 0
    per_path: Counter = field(default_factory=Counter)

    def record(self, path: str, nbytes: int) -> None:
        self.chunks_fetched += 1
        self.bytes_read += nbytes
        self.per_path[path] += 1

    def merge(self, other: "AccessTrace") -> None:
        self.chunks_fetched += other.chunks_fetched
        self.bytes_read += other.bytes_read
        self.per_path.update(other.per_path)


def normalize_region(region, shape: tuple) -> tuple:
    """Turn ``None``, ints and unit-step slices into per-dimension ``(start, stop)``."""
    if region is None:
        region = ()
    if not isinstance(region, tuple):
        region = (region,)
    if len(region) > len(shape):
        raise ChunkRangeError(f"region has rank {len(region)}, array has rank {len(shape)}")
    out = []
    for d, extent in enumerate(shape):
        item = region[d] if d < len(region) else slice(None)
        if isinstance(item, slice):
            if item.step not in (None, 1):
                raise InvalidArgumentError("only unit-step slices are supported")
            lo = 0 if item.start is None else int(item.start)
            hi = extent if item.stop is None else int(item.stop)
            if not 0 <= lo <= hi <= extent:
                raise ChunkRangeError(f"slice {lo}:{hi} outside dimension {d} of extent {extent}")
        elif isinstance(item, tuple) and len(item) == 2:
            lo, hi = int(item[0]), int(item[1])
            if not 0 <= lo <= hi <= extent:
                raise ChunkRangeError(f"range {lo}:{hi} outside dimension {d} of extent {extent}")
        else:
            lo = int(item)
            if not 0 <= lo < extent:
                raise ChunkRangeError(f"index {lo} outside dimension {d} of extent {extent}")
            hi = lo + 1
        out.append((lo, hi))
    return tuple(out)


def _decode_chunk(meta: ArrayMeta, frame: bytes, extent: tuple, codec: str) -> np.ndarray:
    raw = decompress(codec, frame)
    expected = int(np.prod(extent)) * meta.numpy_dtype.itemsize
    if len(raw) != expected:
        raise CorruptObjectError(f"chunk holds {len(raw)} bytes, expected {expected} for extent {extent}")
    return np.frombuffer(raw, meta.numpy_dtype).reshape(extent)


class ManifestView:
    """Read access to the arrays and groups described by one manifest."""

    def __init__(self, manifest: Manifest, objects: ObjectStore):
        self.manifest = manifest
        self.objects = objects
        self.trace = AccessTrace()

    # metadata
    def has_array(self, path) -> bool:
        return str(path) in self.manifest.arrays

    def has_group(self, path) -> bool:
        return str(path) in self.manifest.groups

    def array_meta(self, path) -> ArrayMeta:
        path = str(TreePath.parse(path))
        try:
            return self.manifest.arrays[path]
        except KeyError:
            raise self._not_found(path) from None

    def group_attrs(self, path=ROOT) -> dict:
        path = "" if path in ("", None) else str(TreePath.parse(path))
        try:
            return dict(self.manifest.groups[path])
        except KeyError:
            raise self._not_found(path) from None

    def children(self, path=ROOT) -> list:
        prefix = "" if path in ("", None) else str(TreePath.parse(path)) + "/"
        names = set()
        for p in self.manifest.paths():
            if p and p.startswith(prefix) and p != prefix.rstrip("/"):
                names.add(p[len(prefix):].split("/", 1)[0])
        return sorted(names)

    def _not_found(self, path: str) -> PathNotFoundError:
        segs = path.split("/") if path else []
        resolved = ""
        for i in range(len(segs), 0, -1):
            prefix = "/".join(segs[:i])
            if prefix in self.manifest.groups or prefix in self.manifest.arrays:
                resolved = prefix
                break
        return PathNotFoundError(path, resolved)

    # data
    def _chunk(self, path: str, meta: ArrayMeta, key: tuple, trace: AccessTrace) -> Optional[np.ndarray]:
        ref = self.manifest.chunks.get(path, {}).get(key)
        if ref is None:
            return None
        frame = self.objects.get(ref.object_id)
        trace.record(path, len(frame))
        self.trace.record(path, len(frame))
        return _decode_chunk(meta, frame, meta.grid.chunk_extent(key), ref.codec)

    def read_region(self, path, region=None) -> tuple:
        """Return ``(data, trace)`` for ``region`` of the array at ``path``.

        Exactly the chunks intersecting the region are fetched, each once;
        chunks never written decode to the fill value without a fetch.
        """
        path = str(TreePath.parse(path))
        meta = self.array_meta(path)
        bounds = normalize_region(region, meta.shape)
        shape = tuple(hi - lo for lo, hi in bounds)
        out = np.empty(shape, dtype=meta.numpy_dtype)
        trace = AccessTrace()
        if out.size == 0:
            return out, trace
        grid = meta.grid
        for key in grid.chunks_in(bounds):
            origin = grid.chunk_origin(key)
            extent = grid.chunk_extent(key)
            src, dst = [], []
            for (lo, hi), o, e in zip(bounds, origin, extent):
                a, b = max(lo, o), min(hi, o + e)
                src.append(slice(a - o, b - o))
                dst.append(slice(a - lo, b - lo))
            block = self._chunk(path, meta, key, trace)
            if block is None:
                out[tuple(dst)] = meta.fill_scalar()
            else:
                out[tuple(dst)] = block[tuple(src)]
        return out, trace

    def read(self, path) -> np.ndarray:
        return self.read_region(path)[0]


def read_region(snapshot: ManifestView, path, region=None) -> tuple:
    """Module-level form of :meth:`ManifestView.read_region`."""
    return snapshot.read_region(path, region)


# --- writing ---------------------------------------------------------------------------

class StagingArea(ManifestView):
    """A mutable manifest plus an object store; chunk objects are written eagerly."""

    def __init__(self, manifest: Manifest, objects: ObjectStore):
        super().__init__(manifest.copy(), objects)

    def set_group(self, path, attrs: Mapping) -> None:
        path = "" if path in ("", None) else str(TreePath.parse(path))
        self.manifest.groups[path] = dict(attrs)
        # intermediate groups must exist for every path to be resolvable
        segs = path.split("/") if path else []
        for i in range(len(segs)):
            self.manifest.groups.setdefault("/".join(segs[:i]), {})

    def delete(self, path) -> None:
        """Remove the group or array at ``path`` and everything beneath it."""
        path = str(TreePath.parse(path))
        prefix = path + "/"
        for p in [p for p in self.manifest.groups if p == path or p.startswith(prefix)]:
            del self.manifest.groups[p]
        for p in [p for p in self.manifest.arrays if p == path or p.startswith(prefix)]:
            del self.manifest.arrays[p]
            self.manifest.chunks.pop(p, None)

    def _put_chunk(self, meta: ArrayMeta, block: np.ndarray) -> ChunkRef:
        data = np.ascontiguousarray(block, dtype=meta.numpy_dtype).tobytes()
        frame = compress(meta.codec, data, **meta.codec_params)
        return ChunkRef(self.objects.put(frame), len(frame), meta.codec)

    def _relayout(self, path: str, old: ArrayMeta, new: ArrayMeta, covered: tuple) -> None:
        """Re-encode chunks whose extent changes when the array is resized."""
        refs = self.manifest.chunks.setdefault(path, {})
        new_grid = new.grid
        old_grid = old.grid
        for key in sorted(refs):
            in_bounds = all(k < g for k, g in zip(key, new_grid.grid_shape))
            if not in_bounds:
                del refs[key]
                continue
            old_ext = old_grid.chunk_extent(key)
            new_ext = new_grid.chunk_extent(key)
            if old_ext == new_ext:
                continue
            origin = new_grid.chunk_origin(key)
            if all(lo <= o and o + e <= hi for (lo, hi), o, e in zip(covered, origin, new_ext)):
                continue
            block = self._chunk(path, old, key, AccessTrace())
            buf = np.full(new_ext, new.fill_scalar(), dtype=new.numpy_dtype)
            common = tuple(slice(0, min(a, b)) for a, b in zip(old_ext, new_ext))
            buf[common] = block[common]
            refs[key] = self._put_chunk(new, buf)

    def write_array(self, path, meta: ArrayMeta, data: np.ndarray, offset: Optional[Sequence[int]] = None) -> Manifest:
        """Write ``data`` at ``offset`` into the array at ``path`` described by ``meta``.

        The array is created if absent and resized if ``meta.shape`` differs
        from the stored shape. Partially covered chunks are read, merged and
        rewritten; chunks outside the region keep their object ids.
        """
        path = str(TreePath.parse(path))
        data = np.asarray(data)
        if data.ndim != len(meta.shape):
            raise InvalidArgumentError(f"{path}: data rank {data.ndim} differs from array rank {len(meta.shape)}")
        if data.dtype.newbyteorder("<") != meta.numpy_dtype and data.dtype != meta.numpy_dtype:
            raise DataTypeError(f"{path}: data type {data.dtype} does not match array type {meta.dtype}")
        offset = tuple(int(o) for o in (offset or (0,) * data.ndim))
        if len(offset) != data.ndim:
            raise InvalidArgumentError(f"{path}: offset rank differs from data rank")
        region = tuple((o, o + n) for o, n in zip(offset, data.shape))
        if any(lo < 0 or hi > s for (lo, hi), s in zip(region, meta.shape)):
            raise ChunkRangeError(f"{path}: region {region} outside array shape {meta.shape}")

        old = self.manifest.arrays.get(path)
        if old is not None:
            if old.chunks != meta.chunks or old.dtype != meta.dtype or old.fill_value != meta.fill_value:
                raise InvalidArgumentError(f"{path}: chunk layout, type or fill value cannot change in place")
            if old.shape != meta.shape:
                self.manifest.arrays[path] = meta
                self._relayout(path, old, meta, region)
        self.manifest.arrays[path] = meta
        refs = self.manifest.chunks.setdefault(path, {})
        grid = meta.grid
        for key in grid.chunks_in(region):
            origin = grid.chunk_origin(key)
            extent = grid.chunk_extent(key)
            src, dst = [], []
            full = True
            for (lo, hi), o, e in zip(region, origin, extent):
                a, b = max(lo, o), min(hi, o + e)
                src.append(slice(a - lo, b - lo))
                dst.append(slice(a - o, b - o))
                full = full and a == o and b == o + e
            if full:
                block = data[tuple(src)]
            else:
                current = self._chunk(path, meta, key, AccessTrace()) if key in refs else None
                if current is None:
                    block = np.full(extent, meta.fill_scalar(), dtype=meta.numpy_dtype)
                else:
                    block = current.copy()
                block[tuple(dst)] = data[tuple(src)]
            refs[key] = self._put_chunk(meta, block)
        return self.manifest


def write_array(txn: StagingArea, path, meta: ArrayMeta, data, offset=None) -> Manifest:
    """Module-level form of :meth:`StagingArea.write_array`."""
    return txn.write_array(path, meta, data, offset)


# --- radar tree layout ---------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkPolicy:
    """Chunk shapes and codec for tree arrays.

    Moment arrays are chunked ``(time, azimuth=full, range=full)``; 1-D
    per-time coordinates use ``coord_chunk`` along time.
    """

    time: int = 32
    coord_chunk: int = 4096
    codec: str = "zlib"
    level: int = 1

    def __post_init__(self):
        if self.time < 1 or self.coord_chunk < 1:
            raise InvalidArgumentError("chunk extents must be >= 1")
        _codec(self.codec)

    @property
    def codec_params(self) -> dict:
        return {"level": int(self.level)} if self.codec == "zlib" else {}

    def chunks_for(self, dims: tuple, shape: tuple) -> tuple:
        out = []
        for d, s in zip(dims, shape):
            if d != "time":
                out.append(max(1, s))
            elif len(dims) == 1:
                out.append(self.coord_chunk)
            else:
                out.append(self.time)
        return tuple(out)

    def meta_for(self, dims: tuple, shape: tuple, dtype, attrs: Mapping) -> ArrayMeta:
        return ArrayMeta(
            shape=shape, chunks=self.chunks_for(dims, shape), dtype=dtype_code(dtype), dims=dims,
            codec=self.codec, codec_params=self.codec_params, attrs=dict(attrs),
        )


DEFAULT_POLICY = ChunkPolicy()


def _store_node(stage: StagingArea, path: str, node, policy: ChunkPolicy) -> None:
    if isinstance(node, GroupNode):
        stage.set_group(path, node.attrs)
        for name, child in node.children.items():
            _store_node(stage, join_path(path, name), child, policy)
    else:
        meta = policy.meta_for(node.dims, node.shape, node.data.dtype, node.attrs)
        stage.write_array(path, meta, node.data)


def store_tree(txn: StagingArea, tree: RadarTree, policy: ChunkPolicy = DEFAULT_POLICY) -> Manifest:
    """Write every group and array of ``tree`` into the staging area.

    VCP groups already present are replaced as a whole.
    """
    if not tree.vcp_names:
        raise InvalidArgumentError("cannot store an empty tree")
    stage = txn
    root_attrs = dict(stage.manifest.groups.get(ROOT, {}))
    root_attrs.update(tree.root.attrs)
    stage.set_group(ROOT, root_attrs)
    for name, node in tree.root.children.items():
        if name in stage.manifest.groups or name in stage.manifest.arrays:
            stage.delete(name)
        _store_node(stage, name, node, policy)
    return stage.manifest


def _materialize_group(view: ManifestView, path: str) -> GroupNode:
    group = GroupNode(attrs=view.group_attrs(path))
    for name in view.children(path):
        child = join_path(path, name)
        if child in view.manifest.groups:
            group.children[name] = _materialize_group(view, child)
        else:
            meta = view.manifest.arrays[child]
            group.children[name] = ArrayNode(view.read(child), meta.dims, dict(meta.attrs))
    return group


def _ordered(group: GroupNode) -> GroupNode:
    """Reorder children the way the tree builders lay them out."""
    names = list(group.children)
    if "time" in names:
        order = ["time"] + sorted((n for n in names if n.startswith("sweep_")), key=lambda n: int(n[6:]))
    elif "azimuth" in names:
        order = [n for n in COORDINATE_NAMES if n in names] + [m.value for m in MOMENT_ORDER if m.value in names]
    else:
        order = sorted(names)
    order += [n for n in names if n not in order]
    group.children = {n: group.children[n] for n in order}
    for child in group.children.values():
        if isinstance(child, GroupNode):
            _ordered(child)
    return group


def _check_layout(view: ManifestView) -> None:
    for vcp in view.children(ROOT):
        if vcp not in view.manifest.groups:
            continue
        tpath = join_path(vcp, "time")
        if tpath not in view.manifest.arrays:
            raise CorruptLayoutError(f"{vcp}: missing time coordinate")
        n_t = view.manifest.arrays[tpath].shape[0]
        for sweep in view.children(vcp):
            spath = join_path(vcp, sweep)
            if spath not in view.manifest.groups:
                continue
            for cname in COORDINATE_NAMES:
                if join_path(spath, cname) not in view.manifest.arrays:
                    raise CorruptLayoutError(f"{spath}: missing coordinate {cname!r}")
            for aname in view.children(spath):
                meta = view.manifest.arrays.get(join_path(spath, aname))
                if meta is not None and meta.dims and meta.dims[0] == "time" and meta.shape[0] != n_t:
                    raise CorruptLayoutError(
                        f"{spath}/{aname}: time length {meta.shape[0]} differs from time coordinate length {n_t}"
                    )


def load_tree(snapshot: ManifestView) -> RadarTree:
    """Materialize the radar tree stored in ``snapshot``."""
    _check_layout(snapshot)
    root = _materialize_group(snapshot, ROOT) if ROOT in snapshot.manifest.groups else GroupNode()
    tree = RadarTree(_ordered(root))
    problems = validate_structure(tree)
    if problems:
        raise CorruptLayoutError("; ".join(problems))
    return tree


# --- incremental appends -----------------------------------------------------------------------

def _grid_from_store(view: ManifestView, vcp: str) -> GroupGrid:
    stub = GroupNode()
    for name in view.children(vcp):
        spath = join_path(vcp, name)
        if spath not in view.manifest.groups:
            continue
        sweep = GroupNode(attrs=view.group_attrs(spath))
        az = view.manifest.arrays[join_path(spath, "azimuth")]
        rng = view.manifest.arrays[join_path(spath, "range")]
        sweep.children["azimuth"] = ArrayNode(np.empty(az.shape, np.float32), az.dims, az.attrs)
        sweep.children["range"] = ArrayNode(np.empty(rng.shape, np.float64), rng.dims, rng.attrs)
        stub.children[name] = sweep
    return GroupGrid.from_group(stub)


def append_volumes(txn: StagingArea, volumes: Iterable, policy: ChunkPolicy = DEFAULT_POLICY,
                   n_rays: int = 360) -> dict:
    """Insert volumes into the stored tree, rewriting only what changes.

    Volumes land in time order within their VCP group. When all new times
    follow the group's last time only the trailing chunks are touched;
    otherwise arrays are rewritten from the earliest insertion point. Returns
    ``{vcp: sorted list of inserted times (ns)}``.
    """
    from .model import build_tree, RadarSite

    by_vcp: dict = {}
    for v in volumes:
        by_vcp.setdefault(v.vcp_name, []).append(v)
    stage = txn
    root_attrs = stage.manifest.groups.get(ROOT)
    inserted = {}
    for vcp in sorted(by_vcp):
        vols = sorted(by_vcp[vcp], key=lambda v: v.time_ns)
        if root_attrs and "site_latitude_deg" in root_attrs and RadarSite.from_attrs(root_attrs) != vols[0].site:
            raise InvalidArgumentError(f"{vcp}: volume site differs from the archive's site")
        new_times = [v.time_ns for v in vols]
        if vcp not in stage.manifest.groups:
            store_tree(stage, build_tree(vols, n_rays), policy)
            root_attrs = stage.manifest.groups.get(ROOT)
            inserted[vcp] = new_times
            continue
        tpath = join_path(vcp, "time")
        old_times = stage.read(tpath)
        merged = np.concatenate([old_times, np.asarray(new_times, dtype=np.int64)])
        order = np.argsort(merged, kind="stable")
        merged_sorted = merged[order]
        dup = merged_sorted[1:][np.diff(merged_sorted) == 0]
        if dup.size:
            raise DuplicateTimeError(f"{vcp}: volume time {format_ns(int(dup[0]))} already present")
        n_old = old_times.size
        n_new = merged.size
        # first position whose content changes
        i0 = int(np.argmax(order != np.arange(n_new))) if np.any(order != np.arange(n_new)) else n_old
        grid = _grid_from_store(stage, vcp)
        slices = [volume_slices(v, grid) for v in vols]
        tail_src = order[i0:]  # indices into merged; < n_old means existing row

        def assemble(old_rows: np.ndarray, new_rows: list, dtype) -> np.ndarray:
            parts = []
            for src in tail_src:
                parts.append(old_rows[src - i0] if src < n_old else new_rows[src - n_old])
            return np.stack(parts).astype(dtype, copy=False)

        tmeta = stage.array_meta(tpath).replace(shape=(n_new,))
        stage.write_array(tpath, tmeta, merged_sorted[i0:], (i0,))
        for k, sg in enumerate(grid.sweeps):
            spath = join_path(vcp, f"sweep_{k}")
            pieces = [s[k] for s in slices]
            existing = set(stage.children(spath))
            kinds = [m for m in MOMENT_ORDER if m.value in existing or any(m in p for p in pieces)]
            columns = {"elevation": ("f4", ("time",)), "ray_time": ("i8", ("time", "azimuth"))}
            for name, (code, dims) in columns.items():
                apath = join_path(spath, name)
                meta = stage.array_meta(apath)
                old_rows = stage.read_region(apath, (slice(i0, n_old),))[0]
                rows = assemble(old_rows, [np.asarray(p[name]) for p in pieces], DTYPES[code])
                stage.write_array(apath, meta.replace(shape=(n_new,) + meta.shape[1:]), rows, (i0,) + (0,) * (rows.ndim - 1))
            shape = (sg.n_rays, sg.range.n_gates)
            for kind in kinds:
                apath = join_path(spath, kind.value)
                if kind.value in existing:
                    meta = stage.array_meta(apath)
                    old_rows = stage.read_region(apath, (slice(i0, n_old),))[0]
                    start = i0
                else:
                    meta = policy.meta_for(("time", "azimuth", "range"), (n_old,) + shape, np.float32,
                                           {"units": kind.units, "long_name": kind.long_name})
                    old_rows = np.full((n_old - 0,) + shape, np.nan, dtype=np.float32)[i0:]
                    start = i0
                    if i0 > 0:
                        stage.write_array(apath, meta, np.full((i0,) + shape, np.nan, dtype=np.float32))
                nan_row = np.full(shape, np.nan, dtype=np.float32)
                rows = assemble(old_rows, [p.get(kind, nan_row) for p in pieces], np.float32)
                stage.write_array(apath, meta.replace(shape=(n_new,) + shape), rows, (start, 0, 0))
        inserted[vcp] = new_times
    return inserted
