import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radarchive.chunkstore import (
    ArrayMeta,
    ChunkGrid,
    ChunkPolicy,
    DirectoryObjectStore,
    Manifest,
    ManifestView,
    MemoryObjectStore,
    StagingArea,
    append_volumes,
    chunk_of,
    compress,
    decompress,
    load_tree,
    object_id,
    store_tree,
)
from radarchive.errors import (
    ChunkRangeError,
    CodecError,
    CorruptFrameError,
    CorruptLayoutError,
    CorruptObjectError,
    DuplicateTimeError,
    InvalidArgumentError,
    ObjectNotFoundError,
)
from radarchive.model import RadarTree, build_tree, resolve_path

from conftest import small_vcp, synth


def stage():
    return StagingArea(Manifest.empty(), MemoryObjectStore())


def f4_meta(shape, chunks, dims=None, **kw):
    return ArrayMeta(shape, chunks, "f4", dims or tuple(f"d{i}" for i in range(len(shape))), **kw)


class TestChunkOf:
    def test_examples(self):
        grid = ChunkGrid((1000, 360, 500), (32, 360, 500))
        assert chunk_of(grid, (65, 0, 0)) == ((2, 0, 0), (1, 0, 0))
        assert chunk_of(grid, (0, 0, 0)) == ((0, 0, 0), (0, 0, 0))

    def test_partial_edge(self):
        grid = ChunkGrid((100,), (32,))
        assert chunk_of(grid, (99,)) == ((3,), (3,))
        assert grid.grid_shape == (4,)
        assert grid.chunk_extent((3,)) == (4,)

    def test_out_of_bounds(self):
        with pytest.raises(ChunkRangeError):
            chunk_of(ChunkGrid((100,), (32,)), (100,))

    @given(st.lists(st.tuples(st.integers(1, 50), st.integers(1, 20)), min_size=1, max_size=3), st.data())
    def test_divmod(self, dims, data):
        shape = tuple(s for s, _ in dims)
        chunks = tuple(c for _, c in dims)
        index = tuple(data.draw(st.integers(0, s - 1)) for s in shape)
        key, off = chunk_of(ChunkGrid(shape, chunks), index)
        for i, c, k, o in zip(index, chunks, key, off):
            assert k * c + o == i and 0 <= o < c


class TestCodecs:
    def test_raw_roundtrip(self):
        frame = compress("raw", b"abc")
        assert frame.endswith(b"abc")
        assert decompress("raw", frame) == b"abc"

    def test_zeros_compress(self):
        frame = compress("zlib", bytes(4096), level=1)
        assert len(frame) < 128
        assert decompress("zlib", frame) == bytes(4096)

    def test_flipped_payload_byte(self):
        frame = bytearray(compress("zlib", b"some payload bytes" * 10))
        frame[-1] ^= 0xFF
        with pytest.raises(CorruptFrameError):
            decompress("zlib", bytes(frame))

    def test_codec_mismatch(self):
        with pytest.raises(CorruptFrameError):
            decompress("zlib", compress("raw", b"x"))

    def test_unknown_codec(self):
        with pytest.raises(CodecError):
            compress("lz4", b"x")

    @given(st.binary(max_size=2048), st.sampled_from([("raw", None), ("zlib", 0), ("zlib", 1), ("zlib", 9)]))
    def test_identity(self, data, codec):
        cid, level = codec
        params = {} if level is None else {"level": level}
        assert decompress(cid, compress(cid, data, **params)) == data


class TestObjectStore:
    def test_content_addressed(self, tmp_path):
        store = DirectoryObjectStore(tmp_path, fsync=False)
        oid = store.put(b"hello")
        assert oid == object_id(b"hello") and len(oid) == 64
        assert store.get(oid) == b"hello"
        assert store.put(b"hello") == oid
        assert store.path_of(oid).parent.name == oid[:2]

    def test_missing(self, tmp_path):
        store = DirectoryObjectStore(tmp_path, fsync=False)
        with pytest.raises(ObjectNotFoundError):
            store.get("0" * 64)

    def test_tampered_object(self, tmp_path):
        store = DirectoryObjectStore(tmp_path, fsync=False)
        oid = store.put(b"hello")
        store.path_of(oid).write_bytes(b"jello")
        with pytest.raises(CorruptObjectError):
            store.get(oid)


class TestArrays:
    def test_full_roundtrip(self):
        s = stage()
        data = np.random.default_rng(0).normal(size=(10, 7)).astype(np.float32)
        s.write_array("a", f4_meta((10, 7), (4, 3)), data)
        out, trace = s.read_region("a")
        np.testing.assert_array_equal(out, data)
        assert trace.chunks_fetched == 3 * 3

    def test_fill_semantics(self):
        s = stage()
        meta = f4_meta((64, 2), (32, 2))
        s.write_array("a", meta, np.ones((32, 2), np.float32))
        out, trace = s.read_region("a", (slice(32, 64),))
        assert np.isnan(out).all()
        assert trace.chunks_fetched == 0

    def test_integer_fill(self):
        s = stage()
        meta = ArrayMeta((4,), (2,), "i8", ("t",), fill_value=7)
        s.write_array("a", meta, np.array([1, 2], dtype=np.int64))
        assert s.read("a").tolist() == [1, 2, 7, 7]

    def test_one_slice_rewrite_changes_one_chunk(self):
        s = stage()
        meta = f4_meta((64, 36, 50), (32, 36, 50))
        s.write_array("a", meta, np.zeros((64, 36, 50), np.float32))
        before = dict(s.manifest.chunks["a"])
        s.write_array("a", meta, np.ones((1, 36, 50), np.float32), (40, 0, 0))
        after = s.manifest.chunks["a"]
        assert sum(before[k] != after[k] for k in before) == 1

    def test_structural_sharing(self):
        s = stage()
        meta = f4_meta((100, 4), (10, 4))
        s.write_array("a", meta, np.zeros((100, 4), np.float32))
        before = dict(s.manifest.chunks["a"])
        s.write_array("a", meta, np.ones((25, 4), np.float32), (15, 0))
        after = s.manifest.chunks["a"]
        changed = {k for k in before if before[k] != after[k]}
        assert changed == {(1, 0), (2, 0), (3, 0)}

    def test_dedup(self, tmp_path):
        store = DirectoryObjectStore(tmp_path, fsync=False)
        s = StagingArea(Manifest.empty(), store)
        meta = f4_meta((64, 8), (32, 8))
        s.write_array("a", meta, np.zeros((64, 8), np.float32))
        n = len(list((tmp_path / "objects").rglob("*")))
        s.write_array("b", meta, np.zeros((64, 8), np.float32))
        assert len(list((tmp_path / "objects").rglob("*"))) == n

    def test_resize_rewrites_edge_only(self):
        s = stage()
        meta = f4_meta((40, 3), (32, 3))
        s.write_array("a", meta, np.zeros((40, 3), np.float32))
        before = dict(s.manifest.chunks["a"])
        grown = meta.replace(shape=(41, 3))
        s.write_array("a", grown, np.ones((1, 3), np.float32), (40, 0))
        assert s.manifest.chunks["a"][(0, 0)] == before[(0, 0)]
        out = s.read("a")
        assert out.shape == (41, 3) and out[40].tolist() == [1, 1, 1] and out[:40].sum() == 0

    def test_region_outside(self):
        s = stage()
        s.write_array("a", f4_meta((4,), (2,)), np.zeros(4, np.float32))
        with pytest.raises(ChunkRangeError):
            s.read_region("a", (slice(2, 6),))
        with pytest.raises(ChunkRangeError):
            s.write_array("a", f4_meta((4,), (2,)), np.zeros(3, np.float32), (2,))

    def test_manifest_canonical(self):
        a, b = stage(), stage()
        meta = f4_meta((4,), (2,), attrs={"z": 1, "a": 2})
        a.write_array("x", meta, np.arange(4, dtype=np.float32))
        a.set_group("g", {"k": "v"})
        b.set_group("g", {"k": "v"})
        b.write_array("x", meta, np.arange(4, dtype=np.float32))
        assert a.manifest.to_bytes() == b.manifest.to_bytes()
        assert Manifest.from_bytes(a.manifest.to_bytes()).hash == a.manifest.hash
        assert b" " not in a.manifest.to_bytes()

    @given(
        shape=st.lists(st.integers(1, 12), min_size=1, max_size=3),
        data=st.data(),
    )
    def test_minimality(self, shape, data):
        shape = tuple(shape)
        chunks = tuple(data.draw(st.integers(1, s)) for s in shape)
        written = tuple(data.draw(st.integers(0, s)) for s in shape)
        s = stage()
        meta = f4_meta(shape, chunks)
        if all(written):
            s.write_array("a", meta, np.ones(written, np.float32))
        else:
            s.write_array("a", meta, np.ones((0,) * len(shape), np.float32))
        region = []
        for extent in shape:
            lo = data.draw(st.integers(0, extent))
            hi = data.draw(st.integers(lo, extent))
            region.append(slice(lo, hi))
        out, trace = s.read_region("a", tuple(region))
        # oracle: written chunks whose index box meets the region box, counted by brute force
        expected = 0
        grid = ChunkGrid(shape, chunks)
        for key in np.ndindex(*grid.grid_shape):
            if key not in s.manifest.chunks.get("a", {}):
                continue
            if all(sl.start < sl.stop and sl.start < min((k + 1) * c, e) and k * c < sl.stop
                   for k, c, e, sl in zip(key, chunks, shape, region)):
                expected += 1
        assert trace.chunks_fetched == expected
        assert out.shape == tuple(sl.stop - sl.start for sl in region)


class TestTreeStore:
    def test_paths(self):
        s = stage()
        store_tree(s, build_tree(synth(2, moments=("DBZH", "ZDR"))))
        moment_paths = [p for p in s.manifest.arrays if p.rsplit("/", 1)[-1] in ("DBZH", "ZDR")]
        assert sorted(moment_paths) == [f"VCP-212/sweep_{k}/{m}" for k in (0, 1) for m in ("DBZH", "ZDR")]
        assert "VCP-212/time" in s.manifest.arrays
        assert s.array_meta("VCP-212/sweep_0/DBZH").chunks == (32, 360, 40)

    def test_roundtrip(self, noise):
        tree = build_tree(synth(5, field=noise, moments=("DBZH", "VRADH", "RHOHV"), azimuth_jitter_deg=0.3))
        s = stage()
        store_tree(s, tree)
        assert load_tree(s).identical(tree)

    def test_empty_tree(self):
        with pytest.raises(InvalidArgumentError):
            store_tree(stage(), RadarTree.empty())

    def test_corrupt_layout(self):
        s = stage()
        store_tree(s, build_tree(synth(3)))
        meta = s.array_meta("VCP-212/sweep_0/DBZH")
        s.manifest.arrays["VCP-212/sweep_0/DBZH"] = meta.replace(shape=(2,) + meta.shape[1:])
        with pytest.raises(CorruptLayoutError):
            load_tree(s)

    def test_independent_loads(self):
        s = stage()
        store_tree(s, build_tree(synth(2)))
        first = ManifestView(s.manifest.copy(), s.objects)
        append_volumes(s, synth(3)[2:])
        a, b = load_tree(first), load_tree(s)
        assert a.times("VCP-212").size == 2 and b.times("VCP-212").size == 3
        with pytest.raises(ValueError):
            a["VCP-212/sweep_0/DBZH"].data[0, 0, 0] = 1.0

    def test_resolve_loaded(self):
        s = stage()
        store_tree(s, build_tree(synth(2)))
        node = resolve_path(load_tree(s), "VCP-212/sweep_0")
        assert {"DBZH", "azimuth", "range", "elevation", "ray_time"} <= set(node.children)

    def test_append_matches_build(self, noise):
        vols = synth(40, field=noise, vcp=small_vcp(n_gates=8))
        s = stage()
        store_tree(s, build_tree(vols[:30]))
        append_volumes(s, vols[30:35])
        append_volumes(s, vols[35:])
        assert load_tree(s).identical(build_tree(vols))

    def test_append_touches_edge_chunk_only(self):
        vols = synth(40, vcp=small_vcp(n_gates=8))
        s = stage()
        store_tree(s, build_tree(vols[:39]))
        before = dict(s.manifest.chunks["VCP-212/sweep_0/DBZH"])
        append_volumes(s, vols[39:])
        after = s.manifest.chunks["VCP-212/sweep_0/DBZH"]
        assert after[(0, 0, 0)] == before[(0, 0, 0)]
        assert after[(1, 0, 0)] != before[(1, 0, 0)]

    def test_insert_out_of_order(self, noise):
        vols = synth(6, field=noise, vcp=small_vcp(n_gates=8))
        s = stage()
        store_tree(s, build_tree(vols[::2]))
        append_volumes(s, vols[1::2])
        assert load_tree(s).identical(build_tree(vols))

    def test_append_duplicate(self):
        vols = synth(3)
        s = stage()
        store_tree(s, build_tree(vols))
        with pytest.raises(DuplicateTimeError):
            append_volumes(s, vols[1:2])

    def test_new_moment_backfilled(self):
        a = synth(2, moments=("DBZH",))
        b = synth(3, moments=("DBZH", "ZDR"))[2:]
        s = stage()
        store_tree(s, build_tree(a))
        append_volumes(s, b)
        zdr = s.read("VCP-212/sweep_0/ZDR")
        assert np.isnan(zdr[:2]).all() and np.isfinite(zdr[2]).all()


@pytest.mark.parametrize("t_chunk", [1, 7, 32])
def test_store_roundtrip_policies(t_chunk, storm):
    tree = build_tree(synth(9, field=storm, vcp=small_vcp(n_gates=16)))
    s = stage()
    store_tree(s, tree, ChunkPolicy(time=t_chunk, codec="raw"))
    assert load_tree(s).identical(tree)
    _, trace = s.read_region("VCP-212/sweep_1/DBZH")
    assert trace.chunks_fetched == math.ceil(9 / t_chunk)
