"""In-memory radar data model: sweeps, volumes and the time-aligned tree.

Layout of a :class:`RadarTree` (one tree holds one radar site)::

    /                         site attributes
    <vcp>/                    one group per volume coverage pattern
    <vcp>/time                int64 ns since epoch, (time,)
    <vcp>/sweep_<k>/          one group per sweep position k
    <vcp>/sweep_<k>/azimuth   float32 canonical ray centres, (azimuth,)
    <vcp>/sweep_<k>/range     float64 gate centres in m, (range,)
    <vcp>/sweep_<k>/elevation float32 per-volume elevation, (time,)
    <vcp>/sweep_<k>/ray_time  int64 ns per ray, (time, azimuth)
    <vcp>/sweep_<k>/<MOMENT>  float32, (time, azimuth, range)

The ``time`` dimension of a sweep group is the coordinate defined on its
parent VCP group.
"""

from __future__ import annotations

import datetime as _dt
import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import (
    DuplicateTimeError,
    GeometryConflictError,
    InvalidArgumentError,
    InvalidPathError,
    OutOfOrderError,
    PathNotFoundError,
)

NAT = np.iinfo(np.int64).min
F32_NAN_BITS = 0x7FC00000
DEFAULT_N_RAYS = 360
TIME_UNITS = "nanoseconds since 1970-01-01T00:00:00Z"

COORDINATE_NAMES = ("azimuth", "range", "elevation", "ray_time")


class MomentKind(str, enum.Enum):
    """Closed set of radar moments understood by the archive."""

    DBZH = "DBZH"
    VRADH = "VRADH"
    ZDR = "ZDR"
    RHOHV = "RHOHV"
    PHIDP = "PHIDP"

    @property
    def units(self) -> str:
        return _MOMENT_UNITS[self]

    @property
    def long_name(self) -> str:
        return _MOMENT_LONG_NAMES[self]

    @classmethod
    def parse(cls, code) -> "MomentKind":
        if isinstance(code, cls):
            return code
        try:
            return cls(str(code).strip().upper())
        except ValueError:
            raise InvalidArgumentError(f"unknown moment code {code!r}") from None


_MOMENT_UNITS = {
    MomentKind.DBZH: "dBZ",
    MomentKind.VRADH: "m/s",
    MomentKind.ZDR: "dB",
    MomentKind.RHOHV: "1",
    MomentKind.PHIDP: "degrees",
}
_MOMENT_LONG_NAMES = {
    MomentKind.DBZH: "equivalent reflectivity factor h",
    MomentKind.VRADH: "radial velocity of scatterers away from instrument h",
    MomentKind.ZDR: "log differential reflectivity hv",
    MomentKind.RHOHV: "cross correlation ratio hv",
    MomentKind.PHIDP: "differential phase hv",
}
MOMENT_ORDER = tuple(MomentKind)


def to_ns(value) -> int:
    """Convert a timestamp-like value to integer nanoseconds since the epoch (UTC).

    Accepts ``int`` (already ns), :class:`numpy.datetime64`, timezone-aware or
    naive (taken as UTC) :class:`datetime.datetime`, and RFC 3339 strings.
    """
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    if isinstance(value, np.datetime64):
        return int(value.astype("datetime64[ns]").astype(np.int64))
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z") or text.endswith("z"):
            text = text[:-1]
        elif len(text) > 6 and text[-6] in "+-" and text[-3] == ":":
            parsed = _dt.datetime.fromisoformat(text)
            return to_ns(parsed)
        return int(np.datetime64(text, "ns").astype(np.int64))
    if isinstance(value, _dt.datetime):
        if value.tzinfo is not None:
            value = value.astimezone(_dt.timezone.utc).replace(tzinfo=None)
        return int(np.datetime64(value, "ns").astype(np.int64))
    raise InvalidArgumentError(f"cannot interpret {value!r} as a timestamp")


def ns_to_datetime64(ns) -> np.datetime64:
    return np.datetime64(int(ns), "ns")


def format_ns(ns: int) -> str:
    """RFC 3339 rendering with nanosecond precision, e.g. ``2011-05-20T00:00:00.000000000Z``."""
    return str(np.datetime64(int(ns), "ns")) + "Z"


def _f32(value) -> float:
    return float(np.float32(value))


def _readonly(a: np.ndarray) -> np.ndarray:
    if a.flags.writeable:
        a.setflags(write=False)
    return a


def canonical_nans(a: np.ndarray) -> np.ndarray:
    """Return ``a`` with every NaN replaced by the canonical quiet NaN (copy only if needed)."""
    nan = np.isnan(a)
    if not nan.any():
        return a
    bits = a.view(np.uint32)
    if np.all(bits[nan] == F32_NAN_BITS):
        return a
    out = np.array(a, copy=True)
    out[nan] = np.float32(np.nan)
    return out


@dataclass(frozen=True)
class RadarSite:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float
    site_id: str

    def __post_init__(self):
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise InvalidArgumentError(f"site latitude {self.latitude_deg} outside [-90, 90]")
        object.__setattr__(self, "latitude_deg", float(self.latitude_deg))
        object.__setattr__(self, "longitude_deg", float(self.longitude_deg))
        object.__setattr__(self, "altitude_m", _f32(self.altitude_m))
        object.__setattr__(self, "site_id", str(self.site_id))

    def attrs(self) -> dict:
        return {
            "site_id": self.site_id,
            "site_latitude_deg": self.latitude_deg,
            "site_longitude_deg": self.longitude_deg,
            "site_altitude_m": self.altitude_m,
        }

    @classmethod
    def from_attrs(cls, attrs: Mapping) -> "RadarSite":
        return cls(
            latitude_deg=attrs["site_latitude_deg"],
            longitude_deg=attrs["site_longitude_deg"],
            altitude_m=attrs["site_altitude_m"],
            site_id=attrs.get("site_id", ""),
        )


@dataclass(frozen=True, eq=False)
class SweepGeometry:
    """Geometry of one sweep.

    ``elevation_deg``, ``range_start_m``, ``range_step_m`` and the azimuths are
    held at 32-bit float precision (the on-disk precision), so encoding never
    loses information. ``ray_times`` are ``datetime64[ns]``; ``NaT`` marks a
    canonical ray that received no measurement.
    """

    elevation_deg: float
    azimuth_deg: np.ndarray
    range_start_m: float
    range_step_m: float
    n_gates: int
    ray_times: np.ndarray

    def __post_init__(self):
        az = np.ascontiguousarray(self.azimuth_deg, dtype=np.float32)
        times = np.asarray(self.ray_times)
        if times.dtype.kind == "M":
            times = times.astype("datetime64[ns]")
        else:
            times = times.astype(np.int64).view("datetime64[ns]")
        times = np.ascontiguousarray(times)
        if az.ndim != 1 or az.size == 0:
            raise InvalidArgumentError("azimuth_deg must be a nonempty 1-D array")
        if times.shape != az.shape:
            raise InvalidArgumentError("ray_times must have one entry per ray")
        if not np.all(np.isfinite(az)) or np.any(az < 0) or np.any(az >= 360):
            raise InvalidArgumentError("azimuths must lie within [0, 360)")
        step = _f32(self.range_step_m)
        if not step > 0:
            raise InvalidArgumentError("range_step_m must be positive")
        n_gates = int(self.n_gates)
        if n_gates <= 0:
            raise InvalidArgumentError("n_gates must be positive")
        object.__setattr__(self, "azimuth_deg", _readonly(az))
        object.__setattr__(self, "ray_times", _readonly(times))
        object.__setattr__(self, "elevation_deg", _f32(self.elevation_deg))
        object.__setattr__(self, "range_start_m", _f32(self.range_start_m))
        object.__setattr__(self, "range_step_m", step)
        object.__setattr__(self, "n_gates", n_gates)

    @property
    def n_rays(self) -> int:
        return int(self.azimuth_deg.size)

    @property
    def range_m(self) -> np.ndarray:
        """Gate-centre ranges in metres (float64)."""
        return range_coordinate(self.range_start_m, self.range_step_m, self.n_gates)

    def identical(self, other: "SweepGeometry") -> bool:
        return (
            self.elevation_deg == other.elevation_deg
            and self.range_start_m == other.range_start_m
            and self.range_step_m == other.range_step_m
            and self.n_gates == other.n_gates
            and _bitwise_equal(self.azimuth_deg, other.azimuth_deg)
            and _bitwise_equal(self.ray_times, other.ray_times)
        )


def range_coordinate(start: float, step: float, n_gates: int) -> np.ndarray:
    return float(start) + np.arange(n_gates, dtype=np.float64) * float(step)


@dataclass(frozen=True, eq=False)
class Sweep:
    geometry: SweepGeometry
    moments: Mapping[MomentKind, np.ndarray]

    def __post_init__(self):
        geo = self.geometry
        shape = (geo.n_rays, geo.n_gates)
        moments = {}
        for code, values in self.moments.items():
            kind = MomentKind.parse(code)
            arr = np.ascontiguousarray(values, dtype=np.float32)
            if arr.shape != shape:
                raise InvalidArgumentError(
                    f"moment {kind.value} has shape {arr.shape}, expected {shape}"
                )
            arr = canonical_nans(arr)
            _check_moment_range(kind, arr)
            moments[kind] = _readonly(arr)
        if not moments:
            raise InvalidArgumentError("a sweep needs at least one moment")
        ordered = {k: moments[k] for k in MOMENT_ORDER if k in moments}
        object.__setattr__(self, "moments", ordered)

    def identical(self, other: "Sweep") -> bool:
        if not self.geometry.identical(other.geometry):
            return False
        if list(self.moments) != list(other.moments):
            return False
        return all(_bitwise_equal(self.moments[k], other.moments[k]) for k in self.moments)


def _check_moment_range(kind: MomentKind, arr: np.ndarray) -> None:
    if kind is MomentKind.RHOHV:
        lo, hi = 0.0, 1.05
    elif kind is MomentKind.PHIDP:
        lo, hi = -180.0, 360.0
    else:
        return
    finite = arr[np.isfinite(arr)]
    if finite.size and (finite.min() < lo or finite.max() > hi or (kind is MomentKind.PHIDP and finite.max() >= hi)):
        raise InvalidArgumentError(f"{kind.value} values outside the physical range [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class VolumeScan:
    vcp_name: str
    volume_time: np.datetime64
    site: RadarSite
    sweeps: Sequence[Sweep]

    def __post_init__(self):
        if not self.vcp_name or "/" in self.vcp_name or "\\" in self.vcp_name:
            raise InvalidArgumentError(f"invalid vcp_name {self.vcp_name!r}")
        if len(self.sweeps) < 1:
            raise InvalidArgumentError("a volume needs at least one sweep")
        object.__setattr__(self, "volume_time", ns_to_datetime64(to_ns(self.volume_time)))
        object.__setattr__(self, "sweeps", tuple(self.sweeps))

    @property
    def time_ns(self) -> int:
        return int(self.volume_time.astype(np.int64))

    def identical(self, other: "VolumeScan") -> bool:
        return (
            self.vcp_name == other.vcp_name
            and self.time_ns == other.time_ns
            and self.site == other.site
            and len(self.sweeps) == len(other.sweeps)
            and all(a.identical(b) for a, b in zip(self.sweeps, other.sweeps))
        )


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# --- azimuth canonicalization --------------------------------------------------

def canonical_azimuths(n_rays: int) -> np.ndarray:
    width = 360.0 / n_rays
    return ((np.arange(n_rays, dtype=np.float64) + 0.5) * width).astype(np.float32)


def canonical_ray_sources(azimuth_deg: np.ndarray, n_rays: int) -> np.ndarray:
    """Index of the measured ray feeding each canonical ray, -1 where none.

    A measured ray falls in canonical cell ``floor(az / width)`` (half-open
    cells); each cell takes its member closest to the cell centre, ties going
    to the earlier measured ray.
    """
    if n_rays < 1:
        raise InvalidArgumentError("n_rays must be at least 1")
    width = 360.0 / n_rays
    az = np.asarray(azimuth_deg, dtype=np.float64)
    cell = np.minimum(np.floor(az / width).astype(np.int64), n_rays - 1)
    dist = np.abs(az - (cell + 0.5) * width)
    order = np.lexsort((np.arange(az.size), dist, cell))
    sorted_cells = cell[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_cells[1:] != sorted_cells[:-1]
    sources = np.full(n_rays, -1, dtype=np.int64)
    sources[sorted_cells[first]] = order[first]
    return sources


def canonicalize_azimuths(sweep: Sweep, n_rays: int = DEFAULT_N_RAYS) -> Sweep:
    """Map ``sweep`` onto ``n_rays`` rays centred at ``(i + 0.5) * 360 / n_rays``.

    Values are copied from the nearest measured ray, never interpolated;
    canonical rays without a measured ray inside their cell become NaN (ray
    time NaT).
    """
    if int(n_rays) < 1:
        raise InvalidArgumentError("n_rays must be at least 1")
    n_rays = int(n_rays)
    geo = sweep.geometry
    sources = canonical_ray_sources(geo.azimuth_deg, n_rays)
    target_az = canonical_azimuths(n_rays)
    if (
        geo.n_rays == n_rays
        and np.array_equal(sources, np.arange(n_rays))
        and _bitwise_equal(geo.azimuth_deg, target_az)
    ):
        return sweep
    have = sources >= 0
    src = np.where(have, sources, 0)
    times = geo.ray_times.view(np.int64)[src]
    times = np.where(have, times, NAT)
    moments = {}
    for kind, values in sweep.moments.items():
        out = values[src]
        out[~have] = np.float32(np.nan)
        moments[kind] = out
    new_geo = SweepGeometry(
        elevation_deg=geo.elevation_deg,
        azimuth_deg=target_az,
        range_start_m=geo.range_start_m,
        range_step_m=geo.range_step_m,
        n_gates=geo.n_gates,
        ray_times=times.view("datetime64[ns]"),
    )
    return Sweep(new_geo, moments)


# --- tree paths ----------------------------------------------------------------

@dataclass(frozen=True)
class TreePath:
    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise InvalidPathError("a tree path needs at least one segment")
        for s in segs:
            if not isinstance(s, str) or not s or "/" in s:
                raise InvalidPathError(f"invalid path segment {s!r}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def parse(cls, path: Union[str, "TreePath", Sequence[str]]) -> "TreePath":
        if isinstance(path, TreePath):
            return path
        if isinstance(path, str):
            if path == "":
                raise InvalidPathError("empty path")
            return cls(tuple(path.split("/")))
        return cls(tuple(path))

    def __str__(self) -> str:
        return "/".join(self.segments)

    @property
    def parent(self) -> str:
        return "/".join(self.segments[:-1])

    @property
    def name(self) -> str:
        return self.segments[-1]


PathLike = Union[str, TreePath]


def join_path(*parts: str) -> str:
    return "/".join(p for p in parts if p)


# --- tree nodes ------------------------------------------------------------------

@dataclass(eq=False)
class ArrayNode:
    data: np.ndarray
    dims: tuple
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(self.dims)
        _readonly(self.data)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(eq=False)
class GroupNode:
    attrs: dict = field(default_factory=dict)
    children: dict = field(default_factory=dict)

    def groups(self) -> dict:
        return {k: v for k, v in self.children.items() if isinstance(v, GroupNode)}

    def arrays(self) -> dict:
        return {k: v for k, v in self.children.items() if isinstance(v, ArrayNode)}


Node = Union[GroupNode, ArrayNode]


class RadarTree:
    """Hierarchical, time-indexed collection of volumes from one site.

    Trees are values: :func:`append_volume` returns a new tree and leaves the
    original untouched (unchanged groups are shared).
    """

    def __init__(self, root: GroupNode | None = None):
        self.root = root if root is not None else GroupNode()

    @classmethod
    def empty(cls) -> "RadarTree":
        return cls(GroupNode())

    def __getitem__(self, path: PathLike) -> Node:
        return resolve_path(self, path)

    def __contains__(self, path) -> bool:
        try:
            resolve_path(self, path)
        except (PathNotFoundError, InvalidPathError):
            return False
        return True

    @property
    def vcp_names(self) -> list:
        return list(self.root.groups())

    @property
    def site(self) -> RadarSite | None:
        if "site_latitude_deg" not in self.root.attrs:
            return None
        return RadarSite.from_attrs(self.root.attrs)

    def walk(self) -> Iterator[tuple]:
        """Yield ``(path, node)`` for every node below the root, depth first."""

        def _walk(prefix, group):
            for name, child in group.children.items():
                path = join_path(prefix, name)
                yield path, child
                if isinstance(child, GroupNode):
                    yield from _walk(path, child)

        yield from _walk("", self.root)

    def paths(self) -> list:
        return [p for p, _ in self.walk()]

    def times(self, vcp_name: str) -> np.ndarray:
        node = resolve_path(self, join_path(vcp_name, "time"))
        return node.data.view("datetime64[ns]")

    def identical(self, other: "RadarTree") -> bool:
        """Structural, attribute and bitwise array equality."""
        if self.root.attrs != other.root.attrs:
            return False
        mine = list(self.walk())
        theirs = list(other.walk())
        if [p for p, _ in mine] != [p for p, _ in theirs]:
            return False
        for (_, a), (_, b) in zip(mine, theirs):
            if type(a) is not type(b) or a.attrs != b.attrs:
                return False
            if isinstance(a, ArrayNode) and (a.dims != b.dims or not _bitwise_equal(a.data, b.data)):
                return False
        return True

    def __repr__(self) -> str:
        lines = ["<RadarTree>"]
        for path, node in self.walk():
            depth = path.count("/")
            name = path.rsplit("/", 1)[-1]
            if isinstance(node, GroupNode):
                lines.append("  " * (depth + 1) + name + "/")
            else:
                lines.append("  " * (depth + 1) + f"{name} {node.dims} {node.data.dtype}")
        return "\n".join(lines)


def resolve_path(tree: RadarTree, path: PathLike) -> Node:
    """Return the group or array at ``path`` (exact match per segment)."""
    tp = TreePath.parse(path)
    node: Node = tree.root
    resolved = []
    for seg in tp.segments:
        if not isinstance(node, GroupNode) or seg not in node.children:
            raise PathNotFoundError(tp, "/".join(resolved))
        node = node.children[seg]
        resolved.append(seg)
    return node


# --- stacking volumes into groups --------------------------------------------------

@dataclass(frozen=True)
class RangeGrid:
    start_m: float
    step_m: float
    n_gates: int

    @property
    def values(self) -> np.ndarray:
        return range_coordinate(self.start_m, self.step_m, self.n_gates)

    def attrs(self) -> dict:
        return {"units": "m", "long_name": "range to gate centre",
                "range_start_m": self.start_m, "range_step_m": self.step_m}


@dataclass(frozen=True)
class SweepGrid:
    n_rays: int
    range: RangeGrid
    elevation_deg: float


@dataclass(frozen=True)
class GroupGrid:
    """Shared grids of one VCP group, fixed by the group's first volume."""

    sweeps: tuple

    @classmethod
    def from_volume(cls, volume: VolumeScan, n_rays: int = DEFAULT_N_RAYS) -> "GroupGrid":
        return cls(tuple(
            SweepGrid(
                n_rays=int(n_rays),
                range=RangeGrid(s.geometry.range_start_m, s.geometry.range_step_m, s.geometry.n_gates),
                elevation_deg=s.geometry.elevation_deg,
            )
            for s in volume.sweeps
        ))

    @classmethod
    def from_group(cls, group: GroupNode) -> "GroupGrid":
        sweeps = []
        for k in range(len(group.groups())):
            sg = group.children[f"sweep_{k}"]
            rng = sg.children["range"].attrs
            sweeps.append(SweepGrid(
                n_rays=int(sg.children["azimuth"].shape[0]),
                range=RangeGrid(rng["range_start_m"], rng["range_step_m"], int(sg.children["range"].shape[0])),
                elevation_deg=sg.attrs["elevation_deg"],
            ))
        return cls(tuple(sweeps))


def align_range(values: np.ndarray, geo: SweepGeometry, grid: RangeGrid, where: str) -> np.ndarray:
    """Place ``values`` (rays x gates on ``geo``'s range grid) onto ``grid``.

    Grids must share the gate spacing and differ in start by a whole number
    of gates; gates outside the target grid are dropped, missing ones NaN.
    """
    if geo.range_step_m != grid.step_m:
        raise GeometryConflictError(
            f"{where}: range step {geo.range_step_m} m differs from group's {grid.step_m} m"
        )
    if geo.range_start_m == grid.start_m and geo.n_gates == grid.n_gates:
        return values
    shift = (geo.range_start_m - grid.start_m) / grid.step_m
    offset = int(round(shift))
    if abs(shift - offset) > 1e-6:
        raise GeometryConflictError(f"{where}: range grid offset is not a whole number of gates")
    out = np.full((values.shape[0], grid.n_gates), np.nan, dtype=np.float32)
    lo = max(0, offset)
    hi = min(grid.n_gates, offset + geo.n_gates)
    if hi > lo:
        out[:, lo:hi] = values[:, lo - offset:hi - offset]
    return out


def volume_slices(volume: VolumeScan, grid: GroupGrid) -> list:
    """Per-sweep arrays contributed by ``volume`` at one time step of its group.

    Returns one dict per sweep with keys ``elevation`` (float32 scalar),
    ``ray_time`` (int64, rays) and a :class:`MomentKind` key per moment
    (float32, rays x gates), all on the group's canonical grids.
    """
    if len(volume.sweeps) != len(grid.sweeps):
        raise GeometryConflictError(
            f"{volume.vcp_name}: volume has {len(volume.sweeps)} sweeps, group has {len(grid.sweeps)}"
        )
    out = []
    for k, (sweep, sg) in enumerate(zip(volume.sweeps, grid.sweeps)):
        where = f"{volume.vcp_name}/sweep_{k}"
        canon = canonicalize_azimuths(sweep, sg.n_rays)
        piece = {
            "elevation": np.float32(canon.geometry.elevation_deg),
            "ray_time": np.ascontiguousarray(canon.geometry.ray_times.view(np.int64)),
        }
        for kind, values in canon.moments.items():
            piece[kind] = align_range(values, canon.geometry, sg.range, where)
        out.append(piece)
    return out


def _group_from_slices(vcp_name: str, site: RadarSite, grid: GroupGrid, times: list, slices: list) -> GroupNode:
    group = GroupNode(attrs={"vcp_name": vcp_name, **site.attrs()})
    group.children["time"] = ArrayNode(
        np.asarray(times, dtype=np.int64), ("time",),
        {"units": TIME_UNITS, "long_name": "volume start time"},
    )
    n_t = len(times)
    for k, sg in enumerate(grid.sweeps):
        per_time = [s[k] for s in slices]
        sweep = GroupNode(attrs={"sweep_index": k, "elevation_deg": sg.elevation_deg})
        sweep.children["azimuth"] = ArrayNode(
            canonical_azimuths(sg.n_rays), ("azimuth",),
            {"units": "degrees", "long_name": "canonical ray centre azimuth"},
        )
        sweep.children["range"] = ArrayNode(sg.range.values, ("range",), sg.range.attrs())
        sweep.children["elevation"] = ArrayNode(
            np.array([p["elevation"] for p in per_time], dtype=np.float32), ("time",),
            {"units": "degrees", "long_name": "sweep elevation angle"},
        )
        sweep.children["ray_time"] = ArrayNode(
            np.stack([p["ray_time"] for p in per_time]).astype(np.int64, copy=False), ("time", "azimuth"),
            {"units": TIME_UNITS, "long_name": "time of the measured ray feeding each canonical ray"},
        )
        kinds = [m for m in MOMENT_ORDER if any(m in p for p in per_time)]
        shape = (sg.n_rays, sg.range.n_gates)
        for kind in kinds:
            data = np.empty((n_t,) + shape, dtype=np.float32)
            for i, p in enumerate(per_time):
                if kind in p:
                    data[i] = p[kind]
                else:
                    data[i] = np.nan
            sweep.children[kind.value] = ArrayNode(
                data, ("time", "azimuth", "range"),
                {"units": kind.units, "long_name": kind.long_name},
            )
        group.children[f"sweep_{k}"] = sweep
    return group


def _check_site(tree_site: RadarSite | None, volume: VolumeScan) -> None:
    if tree_site is not None and tree_site != volume.site:
        raise InvalidArgumentError(
            f"volume from site {volume.site.site_id!r} cannot join a tree of site {tree_site.site_id!r}"
        )


def build_tree(volumes: Iterable[VolumeScan], n_rays: int = DEFAULT_N_RAYS) -> RadarTree:
    """Group volumes by VCP and stack their sweeps along a leading time axis."""
    volumes = list(volumes)
    if not volumes:
        raise InvalidArgumentError("build_tree needs at least one volume")
    site = volumes[0].site
    by_vcp: dict = {}
    for v in volumes:
        _check_site(site, v)
        by_vcp.setdefault(v.vcp_name, []).append(v)
    root = GroupNode(attrs=site.attrs())
    for name in sorted(by_vcp):
        group_vols = sorted(by_vcp[name], key=lambda v: v.time_ns)
        times = [v.time_ns for v in group_vols]
        dup = [t for a, t in zip(times, times[1:]) if a == t]
        if dup:
            raise DuplicateTimeError(f"{name}: duplicate volume time {format_ns(dup[0])}")
        grid = GroupGrid.from_volume(group_vols[0], n_rays)
        slices = [volume_slices(v, grid) for v in group_vols]
        root.children[name] = _group_from_slices(name, site, grid, times, slices)
    return RadarTree(root)


def append_volume(tree: RadarTree, volume: VolumeScan, n_rays: int = DEFAULT_N_RAYS) -> RadarTree:
    """Return a new tree with ``volume`` stacked at the end of its VCP group."""
    _check_site(tree.site, volume)
    root = GroupNode(attrs=dict(tree.root.attrs) or volume.site.attrs(), children=dict(tree.root.children))
    name = volume.vcp_name
    existing = tree.root.children.get(name)
    if existing is None:
        grid = GroupGrid.from_volume(volume, n_rays)
        root.children[name] = _group_from_slices(
            name, volume.site, grid, [volume.time_ns], [volume_slices(volume, grid)]
        )
        root.children = {k: root.children[k] for k in sorted(root.children)}
        return RadarTree(root)

    old_times = existing.children["time"].data
    last = int(old_times[-1])
    if volume.time_ns == last:
        raise DuplicateTimeError(f"{name}: volume time {format_ns(last)} already present")
    if volume.time_ns < last:
        raise OutOfOrderError(
            f"{name}: volume time {format_ns(volume.time_ns)} precedes last time {format_ns(last)}"
        )
    grid = GroupGrid.from_group(existing)
    pieces = volume_slices(volume, grid)
    n_old = old_times.size
    group = GroupNode(attrs=dict(existing.attrs))
    group.children["time"] = ArrayNode(
        np.append(old_times, np.int64(volume.time_ns)), ("time",), dict(existing.children["time"].attrs)
    )
    for k, sg in enumerate(grid.sweeps):
        old = existing.children[f"sweep_{k}"]
        piece = pieces[k]
        new = GroupNode(attrs=dict(old.attrs))
        for cname in ("azimuth", "range"):
            new.children[cname] = old.children[cname]
        new.children["elevation"] = ArrayNode(
            np.append(old.children["elevation"].data, piece["elevation"]).astype(np.float32),
            ("time",), dict(old.children["elevation"].attrs),
        )
        new.children["ray_time"] = ArrayNode(
            np.concatenate([old.children["ray_time"].data, piece["ray_time"][None]]),
            ("time", "azimuth"), dict(old.children["ray_time"].attrs),
        )
        shape = (sg.n_rays, sg.range.n_gates)
        for kind in MOMENT_ORDER:
            old_node = old.children.get(kind.value)
            if old_node is None and kind not in piece:
                continue
            if old_node is None:
                prev = np.full((n_old,) + shape, np.nan, dtype=np.float32)
                attrs = {"units": kind.units, "long_name": kind.long_name}
            else:
                prev = old_node.data
                attrs = dict(old_node.attrs)
            if kind in piece:
                row = piece[kind][None]
            else:
                row = np.full((1,) + shape, np.nan, dtype=np.float32)
            new.children[kind.value] = ArrayNode(
                np.concatenate([prev, row]), ("time", "azimuth", "range"), attrs
            )
        group.children[f"sweep_{k}"] = new
    root.children[name] = group
    return RadarTree(root)


def validate_structure(tree: RadarTree) -> list:
    """List every structural invariant violation; empty when the tree is sound."""
    problems = []
    for vcp, group in tree.root.children.items():
        if not isinstance(group, GroupNode):
            problems.append(f"{vcp}: expected a VCP group, found an array")
            continue
        if "/" in vcp or not vcp:
            problems.append(f"{vcp}: invalid VCP group name")
        time = group.children.get("time")
        if not isinstance(time, ArrayNode) or time.data.ndim != 1:
            problems.append(f"{vcp}/time: missing or not a 1-D time coordinate")
            n_t = None
        else:
            n_t = time.shape[0]
            t = time.data.astype(np.int64)
            if n_t and not np.all(np.diff(t) > 0):
                problems.append(f"{vcp}/time: time coordinate is not strictly increasing")
        sweeps = group.groups()
        for k in range(len(sweeps)):
            if f"sweep_{k}" not in sweeps:
                problems.append(f"{vcp}/sweep_{k}: sweep groups are not numbered contiguously")
        for sname, sweep in sweeps.items():
            base = f"{vcp}/{sname}"
            az = sweep.children.get("azimuth")
            rng = sweep.children.get("range")
            if not isinstance(az, ArrayNode) or az.data.ndim != 1:
                problems.append(f"{base}/azimuth: missing or not 1-D")
                n_a = None
            else:
                n_a = az.shape[0]
                a = az.data
                if np.any(a < 0) or np.any(a >= 360) or not np.all(np.diff(a.astype(np.float64)) > 0):
                    problems.append(f"{base}/azimuth: values must be increasing within [0, 360)")
            if not isinstance(rng, ArrayNode) or rng.data.ndim != 1:
                problems.append(f"{base}/range: missing or not 1-D")
                n_r = None
            else:
                n_r = rng.shape[0]
            expected = {
                "elevation": (n_t,),
                "ray_time": (n_t, n_a),
            }
            for cname, shape in expected.items():
                node = sweep.children.get(cname)
                if not isinstance(node, ArrayNode):
                    problems.append(f"{base}/{cname}: missing coordinate")
                elif None not in shape and node.shape != shape:
                    problems.append(f"{base}/{cname}: shape {node.shape} inconsistent with coordinates {shape}")
            for aname, node in sweep.arrays().items():
                if aname in COORDINATE_NAMES:
                    continue
                try:
                    kind = MomentKind.parse(aname)
                except InvalidArgumentError:
                    problems.append(f"{base}/{aname}: unknown moment")
                    continue
                shape = (n_t, n_a, n_r)
                if None not in shape and node.shape != shape:
                    problems.append(f"{base}/{aname}: shape {node.shape} inconsistent with coordinates {shape}")
                    continue
                try:
                    _check_moment_range(kind, node.data)
                except InvalidArgumentError as exc:
                    problems.append(f"{base}/{aname}: {exc}")
    return problems
