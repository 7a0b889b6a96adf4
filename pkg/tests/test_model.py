import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radarchive.errors import (
    DuplicateTimeError,
    GeometryConflictError,
    InvalidArgumentError,
    InvalidPathError,
    OutOfOrderError,
    PathNotFoundError,
)
from radarchive.model import (
    ArrayNode,
    MomentKind,
    RadarSite,
    RadarTree,
    TreePath,
    append_volume,
    build_tree,
    canonical_azimuths,
    canonicalize_azimuths,
    resolve_path,
    to_ns,
    validate_structure,
)

from conftest import SITE, make_sweep, make_volume, small_vcp, synth


def canonical_sweep(n_rays=360, n_gates=5, value=None, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(20, 5, (n_rays, n_gates)) if value is None else np.full((n_rays, n_gates), value)
    return make_sweep(canonical_azimuths(n_rays), values)


class TestMomentKind:
    def test_parse_known_codes(self):
        assert MomentKind.parse("dbzh") is MomentKind.DBZH
        assert MomentKind.parse(" RHOHV ") is MomentKind.RHOHV
        assert MomentKind.parse(MomentKind.ZDR) is MomentKind.ZDR

    def test_unknown_code_rejected(self):
        with pytest.raises(InvalidArgumentError):
            MomentKind.parse("KDP")

    def test_units(self):
        assert MomentKind.DBZH.units == "dBZ"
        assert MomentKind.VRADH.units == "m/s"
        assert MomentKind.PHIDP.units == "degrees"

    def test_rhohv_range_enforced(self):
        with pytest.raises(InvalidArgumentError):
            make_sweep(canonical_azimuths(4), np.full((4, 2), 1.2), moment="RHOHV")
        make_sweep(canonical_azimuths(4), np.full((4, 2), 1.05), moment="RHOHV")

    def test_phidp_range_half_open(self):
        with pytest.raises(InvalidArgumentError):
            make_sweep(canonical_azimuths(4), np.full((4, 2), 360.0), moment="PHIDP")
        make_sweep(canonical_azimuths(4), np.full((4, 2), -180.0), moment="PHIDP")


class TestGeometry:
    def test_azimuth_bounds(self):
        with pytest.raises(InvalidArgumentError):
            make_sweep([0.0, 360.0], np.zeros((2, 3)))
        with pytest.raises(InvalidArgumentError):
            make_sweep([-0.1, 10.0], np.zeros((2, 3)))

    def test_range_step_positive(self):
        with pytest.raises(InvalidArgumentError):
            make_sweep([1.0], np.zeros((1, 3)), step=0.0)

    def test_moment_shape_checked(self):
        from radarchive.model import Sweep

        geo = make_sweep([1.0, 2.0], np.zeros((2, 3))).geometry
        with pytest.raises(InvalidArgumentError):
            Sweep(geo, {"DBZH": np.zeros((2, 4), np.float32)})

    def test_to_ns(self):
        assert to_ns("1970-01-01T00:00:01Z") == 1_000_000_000
        assert to_ns("1970-01-01T01:00:00+01:00") == 0
        assert to_ns(np.datetime64("1970-01-01T00:00:00.000000005")) == 5


class TestCanonicalize:
    def test_identity_on_canonical_grid(self):
        sweep = canonical_sweep()
        assert canonicalize_azimuths(sweep, 360) is sweep

    def test_nearest_assignment(self):
        sweep = make_sweep([0.4, 1.6], [[1.0, 1.0], [2.0, 2.0]])
        out = canonicalize_azimuths(sweep, 360)
        values = out.moments[MomentKind.DBZH]
        assert values[0, 0] == 1.0
        assert values[1, 0] == 2.0
        assert np.isnan(values[2:]).all()
        assert out.geometry.azimuth_deg[0] == np.float32(0.5)
        assert out.geometry.azimuth_deg[1] == np.float32(1.5)

    def test_single_ray(self):
        out = canonicalize_azimuths(make_sweep([10.0], [[7.0, 8.0]]), 360)
        values = out.moments[MomentKind.DBZH]
        filled = np.flatnonzero(np.isfinite(values).any(axis=1))
        assert filled.tolist() == [10]
        assert values[10].tolist() == [7.0, 8.0]
        times = out.geometry.ray_times
        assert np.isnat(times).sum() == 359

    def test_n_rays_zero(self):
        with pytest.raises(InvalidArgumentError):
            canonicalize_azimuths(canonical_sweep(), 0)

    @given(
        n_rays=st.sampled_from([8, 36, 360]),
        offsets=st.data(),
    )
    def test_idempotent_and_copies_values(self, n_rays, offsets):
        width = 360.0 / n_rays
        jitter = offsets.draw(st.lists(
            st.floats(-0.45 * width, 0.45 * width, allow_nan=False), min_size=n_rays, max_size=n_rays))
        keep = offsets.draw(st.lists(st.booleans(), min_size=n_rays, max_size=n_rays).filter(any))
        centers = canonical_azimuths(n_rays).astype(np.float64)
        az = np.mod(centers + np.array(jitter), 360.0)[np.array(keep)]
        order = offsets.draw(st.permutations(list(range(az.size))))
        az = az[order]
        values = np.arange(az.size * 3, dtype=np.float32).reshape(az.size, 3)
        once = canonicalize_azimuths(make_sweep(az, values), n_rays)
        twice = canonicalize_azimuths(once, n_rays)
        assert once.identical(twice)
        out = once.moments[MomentKind.DBZH]
        finite = out[np.isfinite(out)]
        # every assigned value is one of the measured values, never a blend
        assert set(finite.tolist()) <= set(values.ravel().tolist())
        assert np.isfinite(out).all(axis=1).sum() == az.size


class TestTreePath:
    def test_parse(self):
        p = TreePath.parse("VCP-212/sweep_0/DBZH")
        assert p.segments == ("VCP-212", "sweep_0", "DBZH")
        assert p.parent == "VCP-212/sweep_0"
        assert str(p) == "VCP-212/sweep_0/DBZH"

    @pytest.mark.parametrize("bad", ["", "a//b", "/a", "a/"])
    def test_invalid(self, bad):
        with pytest.raises(InvalidPathError):
            TreePath.parse(bad)


class TestBuildTree:
    def test_single_volume(self):
        tree = build_tree(synth(1))
        assert tree.vcp_names == ["VCP-212"]
        for k in (0, 1):
            assert tree[f"VCP-212/sweep_{k}/DBZH"].shape == (1, 360, 40)
        assert tree.times("VCP-212").size == 1
        assert validate_structure(tree) == []

    def test_grouping_by_vcp(self):
        vols = synth(3)
        sweeps = vols[1].sweeps
        mixed = [vols[0], make_volume(sweeps, vols[1].time_ns, vcp="B"), vols[2]]
        tree = build_tree(mixed)
        assert tree.vcp_names == ["B", "VCP-212"]
        assert tree.times("VCP-212").size == 2
        assert tree.times("B").size == 1

    def test_offset_rays_stacked(self):
        a = make_volume([make_sweep(canonical_azimuths(360), np.full((360, 4), 10.0))], 0)
        shifted = np.mod(canonical_azimuths(360).astype(np.float64) + 0.3, 360.0)
        b = make_volume([make_sweep(shifted, np.full((360, 4), 20.0))], 10**9)
        tree = build_tree([a, b])
        data = tree["VCP-212/sweep_0/DBZH"].data
        assert data.shape == (2, 360, 4)
        assert np.isfinite(data[1]).sum() > 0
        assert set(np.unique(data[1][np.isfinite(data[1])])) == {20.0}

    def test_site_and_units_recorded(self):
        tree = build_tree(synth(1))
        attrs = tree["VCP-212"].attrs
        assert attrs["site_latitude_deg"] == SITE.latitude_deg
        assert attrs["vcp_name"] == "VCP-212"
        assert tree["VCP-212/sweep_0/DBZH"].attrs["units"] == "dBZ"
        assert tree["VCP-212/sweep_1"].attrs["elevation_deg"] == np.float32(1.5)

    def test_duplicate_time(self):
        v = synth(1)[0]
        with pytest.raises(DuplicateTimeError):
            build_tree([v, v])

    def test_range_step_conflict(self):
        a = make_volume([make_sweep([1.0], np.zeros((1, 3)), step=250.0)], 0)
        b = make_volume([make_sweep([1.0], np.zeros((1, 3)), step=500.0)], 1)
        with pytest.raises(GeometryConflictError):
            build_tree([a, b])

    def test_range_start_whole_gate_shift(self):
        a = make_volume([make_sweep(canonical_azimuths(4), np.ones((4, 3)), start=125.0)], 0)
        b = make_volume([make_sweep(canonical_azimuths(4), [[1, 2, 3]] * 4, start=375.0)], 1)
        tree = build_tree([a, b], n_rays=4)
        row = tree["VCP-212/sweep_0/DBZH"].data[1, 0]
        assert np.isnan(row[0])
        assert row[1:].tolist() == [1.0, 2.0]

    def test_sweep_count_mismatch(self):
        a = make_volume([make_sweep([1.0], np.zeros((1, 3)))], 0)
        b = make_volume([make_sweep([1.0], np.zeros((1, 3)))] * 2, 1)
        with pytest.raises(GeometryConflictError):
            build_tree([a, b])

    def test_mixed_sites_rejected(self):
        a = synth(1)[0]
        b = make_volume(a.sweeps, a.time_ns + 1, site=RadarSite(10.0, 10.0, 0.0, "OTHR"))
        with pytest.raises(InvalidArgumentError):
            build_tree([a, b])

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            build_tree([])


class TestResolvePath:
    def test_sweep_group(self):
        tree = build_tree(synth(1))
        node = resolve_path(tree, "VCP-212/sweep_0")
        assert set(node.children) >= {"azimuth", "range", "elevation", "ray_time", "DBZH"}

    def test_empty_path(self):
        with pytest.raises(InvalidPathError):
            resolve_path(build_tree(synth(1)), "")

    def test_missing_sweep(self):
        tree = build_tree(synth(1))
        with pytest.raises(PathNotFoundError) as info:
            resolve_path(tree, "VCP-212/sweep_9")
        assert info.value.resolved_prefix == "VCP-212"

    def test_path_set(self):
        tree = build_tree(synth(1))
        expected = {"VCP-212", "VCP-212/time"}
        for k in (0, 1):
            base = f"VCP-212/sweep_{k}"
            expected |= {base} | {f"{base}/{n}" for n in ("azimuth", "range", "elevation", "ray_time", "DBZH")}
        assert set(tree.paths()) == expected
        for p in expected:
            assert p in tree
        assert "VCP-212/sweep_0/ZDR" not in tree


class TestAppend:
    def test_append_to_empty(self):
        tree = append_volume(RadarTree.empty(), synth(1)[0])
        assert tree.times("VCP-212").size == 1

    def test_out_of_order(self):
        vols = synth(2)
        tree = build_tree([vols[1]])
        with pytest.raises(OutOfOrderError):
            append_volume(tree, vols[0])

    def test_duplicate(self):
        v = synth(1)[0]
        with pytest.raises(DuplicateTimeError):
            append_volume(build_tree([v]), v)

    def test_original_untouched(self):
        vols = synth(2)
        tree = build_tree([vols[0]])
        append_volume(tree, vols[1])
        assert tree.times("VCP-212").size == 1

    def test_fold_equals_build(self, noise):
        vols = synth(10, field=noise, moments=("DBZH", "ZDR"), azimuth_jitter_deg=0.2)
        tree = RadarTree.empty()
        for v in vols:
            tree = append_volume(tree, v)
        assert tree.identical(build_tree(vols))

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=6, unique=True), st.integers(0, 2**32))
    def test_fold_equals_build_random(self, minutes, seed):
        from radarchive.ingest import NoiseField

        base = synth(len(minutes), vcp=small_vcp(n_rays=8, n_gates=4, elevations=(0.5,)), field=NoiseField(),
                     seed=seed, azimuth_jitter_deg=5.0)
        vols = [make_volume(v.sweeps, m * 60 * 10**9) for v, m in zip(base, minutes)]
        vols.sort(key=lambda v: v.time_ns)
        tree = RadarTree.empty()
        for v in vols:
            tree = append_volume(tree, v, n_rays=8)
        built = build_tree(vols, n_rays=8)
        assert tree.identical(built)
        assert np.all(np.diff(tree.times("VCP-212").astype(np.int64)) > 0)


class TestValidate:
    def test_planted_time_defect(self):
        tree = build_tree(synth(3))
        group = tree.root.children["VCP-212"]
        t = group.children["time"].data[::-1].copy()
        group.children["time"] = ArrayNode(t, ("time",), {})
        problems = validate_structure(tree)
        assert len(problems) == 1
        assert problems[0].startswith("VCP-212/time")

    def test_planted_shape_defect(self):
        tree = build_tree(synth(2))
        sweep = tree.root.children["VCP-212"].children["sweep_1"]
        sweep.children["DBZH"] = ArrayNode(np.zeros((2, 360, 39), np.float32), ("time", "azimuth", "range"), {})
        problems = validate_structure(tree)
        assert len(problems) == 1
        assert problems[0].startswith("VCP-212/sweep_1/DBZH")
