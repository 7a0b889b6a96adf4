"""QVP, QPE accumulation and point time series computed against a snapshot.

Every workflow reads its moment array one time chunk at a time, so a query
touches only the chunks overlapping its time range, and folds each block
into 64-bit accumulators in time order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from ..chunkstore import AccessTrace, ManifestView
from ..errors import InsufficientDataError, InvalidArgumentError, PathNotFoundError
from ..model import MomentKind, RadarSite, join_path, to_ns
from .geometry import GeoPoint, beam_height, locate_gate
from .kernels import MARSHALL_PALMER, TrapezoidAccumulator, ZrParams, azimuthal_sums, qvp_from_sums

DEFAULT_THRESHOLD = 0.5
DEFAULT_MAX_GAP_S = 900.0


@dataclass
class QvpProfile:
    """Azimuthal means of one sweep's moment, stacked over time.

    ``values`` and ``valid_fraction`` are (time, range) float64 arrays;
    ``height_m`` is the beam height of each gate at the median elevation.
    """

    vcp_name: str
    sweep_index: int
    moment: str
    times: np.ndarray
    range_m: np.ndarray
    height_m: np.ndarray
    values: np.ndarray
    valid_fraction: np.ndarray
    threshold: float
    snapshot_id: Optional[str] = None
    trace: AccessTrace = field(default_factory=AccessTrace, compare=False)


@dataclass
class AccumulationGrid:
    """Rainfall depth per gate (mm), integrated over the selected scans."""

    vcp_name: str
    sweep_index: int
    azimuth_deg: np.ndarray
    range_m: np.ndarray
    totals: np.ndarray
    coverage_seconds: np.ndarray
    valid_fraction: np.ndarray
    n_scans: int
    time_start: int
    time_end: int
    params: ZrParams
    max_gap_s: float
    snapshot_id: Optional[str] = None
    trace: AccessTrace = field(default_factory=AccessTrace, compare=False)


@dataclass
class TimeSeries:
    """Values of one moment at the gate nearest a ground location, per scan."""

    vcp_name: str
    sweep_index: int
    moment: str
    target: GeoPoint
    times: np.ndarray
    values: np.ndarray
    pointers: list
    snapshot_id: Optional[str] = None
    trace: AccessTrace = field(default_factory=AccessTrace, compare=False)


def time_bounds(time_range) -> tuple:
    """``(start_ns, end_ns)`` from an inclusive ``(start, end)`` pair; ``None`` leaves a side open."""
    if time_range is None:
        return None, None
    start, end = time_range
    lo = None if start is None else to_ns(start)
    hi = None if end is None else to_ns(end)
    if lo is not None and hi is not None and hi < lo:
        raise InvalidArgumentError("time range ends before it starts")
    return lo, hi


def select_times(times: np.ndarray, time_range) -> tuple:
    """Index interval ``[i0, i1)`` of a sorted time axis within an inclusive range."""
    lo, hi = time_bounds(time_range)
    i0 = 0 if lo is None else int(np.searchsorted(times, lo, side="left"))
    i1 = times.size if hi is None else int(np.searchsorted(times, hi, side="right"))
    return i0, max(i0, i1)


def time_blocks(i0: int, i1: int, chunk: int):
    """Split ``[i0, i1)`` at multiples of ``chunk``."""
    a = i0
    while a < i1:
        b = min(i1, (a // chunk + 1) * chunk)
        yield a, b
        a = b


class _SweepSource:
    """Paths, coordinates and metadata of one stored sweep."""

    def __init__(self, snapshot: ManifestView, vcp_name: str, sweep_index: int, moment):
        self.snapshot = snapshot
        self.vcp = vcp_name
        self.sweep_index = int(sweep_index)
        self.sweep_path = join_path(vcp_name, f"sweep_{self.sweep_index}")
        if not snapshot.has_group(vcp_name) or not snapshot.has_group(self.sweep_path):
            raise snapshot._not_found(self.sweep_path)
        self.moment = MomentKind.parse(moment) if moment is not None else None
        self.moment_path = None
        if self.moment is not None:
            self.moment_path = join_path(self.sweep_path, self.moment.value)
            if not snapshot.has_array(self.moment_path):
                raise PathNotFoundError(self.moment_path, self.sweep_path)
        self.site = RadarSite.from_attrs(snapshot.group_attrs(vcp_name))
        self.times = snapshot.read(join_path(vcp_name, "time"))
        self.range_m = snapshot.read(join_path(self.sweep_path, "range"))
        self.azimuth = snapshot.read(join_path(self.sweep_path, "azimuth"))
        rattrs = snapshot.array_meta(join_path(self.sweep_path, "range")).attrs
        self.range_start_m = float(rattrs["range_start_m"])
        self.range_step_m = float(rattrs["range_step_m"])

    def elevations(self, i0: int, i1: int) -> np.ndarray:
        return self.snapshot.read_region(join_path(self.sweep_path, "elevation"), (slice(i0, i1),))[0]

    def blocks(self, i0: int, i1: int, region=()):
        meta = self.snapshot.array_meta(self.moment_path)
        for a, b in time_blocks(i0, i1, meta.chunks[0]):
            yield a, b, self.snapshot.read_region(self.moment_path, (slice(a, b),) + tuple(region))[0]


def _snapshot_id(snapshot) -> Optional[str]:
    return getattr(snapshot, "id", None)


def qvp(snapshot: ManifestView, vcp_name: str, sweep_index: int, moment, time_range=None,
        threshold: float = DEFAULT_THRESHOLD) -> QvpProfile:
    """Quasi-vertical profile of ``moment`` on one sweep over ``time_range`` (inclusive)."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError("valid-fraction threshold must lie in [0, 1]")
    before = _trace_mark(snapshot)
    src = _SweepSource(snapshot, vcp_name, sweep_index, moment)
    i0, i1 = select_times(src.times, time_range)
    if i1 == i0:
        raise InsufficientDataError(f"{src.sweep_path}: no scans in the selected time range")
    n_rays = src.azimuth.size
    values, fractions = [], []
    for _, _, block in src.blocks(i0, i1):
        acc, cnt = azimuthal_sums(block)
        v, f = qvp_from_sums(acc, cnt, n_rays, threshold)
        values.append(v)
        fractions.append(f)
    elevation = float(np.median(src.elevations(i0, i1).astype(np.float64)))
    return QvpProfile(
        vcp_name=vcp_name, sweep_index=src.sweep_index, moment=src.moment.value,
        times=src.times[i0:i1].copy(), range_m=src.range_m.copy(),
        height_m=np.asarray(beam_height(src.range_m, elevation, src.site.altitude_m)),
        values=np.concatenate(values), valid_fraction=np.concatenate(fractions),
        threshold=float(threshold), snapshot_id=_snapshot_id(snapshot), trace=_trace_since(snapshot, before),
    )


def accumulate_qpe(snapshot: ManifestView, vcp_name: str, sweep_index: int, time_range=None,
                   params: ZrParams = MARSHALL_PALMER, max_gap_s: float = DEFAULT_MAX_GAP_S) -> AccumulationGrid:
    """Rainfall depth from DBZH by trapezoidal integration of Z-R rain rates."""
    if not max_gap_s > 0:
        raise InvalidArgumentError("max gap must be positive")
    before = _trace_mark(snapshot)
    src = _SweepSource(snapshot, vcp_name, sweep_index, MomentKind.DBZH)
    i0, i1 = select_times(src.times, time_range)
    if i1 - i0 < 2:
        raise InsufficientDataError(f"{src.sweep_path}: accumulation needs at least 2 scans, found {i1 - i0}")
    acc = TrapezoidAccumulator((src.azimuth.size, src.range_m.size), params, max_gap_s)
    for a, _, block in src.blocks(i0, i1):
        for j in range(block.shape[0]):
            acc.add(int(src.times[a + j]), block[j])
    return AccumulationGrid(
        vcp_name=vcp_name, sweep_index=src.sweep_index, azimuth_deg=src.azimuth.copy(),
        range_m=src.range_m.copy(), totals=acc.total, coverage_seconds=acc.coverage,
        valid_fraction=acc.valid / float(acc.n_scans), n_scans=acc.n_scans,
        time_start=int(src.times[i0]), time_end=int(src.times[i1 - 1]), params=params,
        max_gap_s=float(max_gap_s), snapshot_id=_snapshot_id(snapshot), trace=_trace_since(snapshot, before),
    )


def sweep_geometry_at(azimuth_deg, range_start_m: float, range_step_m: float, n_gates: int, elevation_deg: float):
    """Minimal geometry record accepted by :func:`locate_gate`."""
    return SimpleNamespace(
        azimuth_deg=azimuth_deg, range_start_m=range_start_m, range_step_m=range_step_m,
        n_gates=int(n_gates), elevation_deg=float(elevation_deg),
    )


def extract_timeseries(snapshot: ManifestView, vcp_name: str, sweep_index: int, moment, target: GeoPoint,
                       time_range=None) -> TimeSeries:
    """Moment values at the gate nearest ``target``, located separately for each scan's elevation."""
    before = _trace_mark(snapshot)
    src = _SweepSource(snapshot, vcp_name, sweep_index, moment)
    i0, i1 = select_times(src.times, time_range)
    values = np.empty(i1 - i0, dtype=np.float64)
    pointers = []
    if i1 > i0:
        elevations = src.elevations(i0, i1)
        for e in elevations:
            geo = sweep_geometry_at(src.azimuth, src.range_start_m, src.range_step_m, src.range_m.size, e)
            pointers.append(locate_gate(src.site, geo, target, src.sweep_index))
        meta = snapshot.array_meta(src.moment_path)
        for a, b in time_blocks(i0, i1, meta.chunks[0]):
            ptrs = pointers[a - i0:b - i0]
            r_lo, r_hi = min(p.ray_index for p in ptrs), max(p.ray_index for p in ptrs) + 1
            g_lo, g_hi = min(p.gate_index for p in ptrs), max(p.gate_index for p in ptrs) + 1
            block = snapshot.read_region(src.moment_path, (slice(a, b), slice(r_lo, r_hi), slice(g_lo, g_hi)))[0]
            for j, p in enumerate(ptrs):
                values[a - i0 + j] = block[j, p.ray_index - r_lo, p.gate_index - g_lo]
    return TimeSeries(
        vcp_name=vcp_name, sweep_index=src.sweep_index, moment=src.moment.value, target=target,
        times=src.times[i0:i1].copy(), values=values, pointers=pointers,
        snapshot_id=_snapshot_id(snapshot), trace=_trace_since(snapshot, before),
    )


def _trace_mark(snapshot: ManifestView) -> AccessTrace:
    t = AccessTrace()
    t.merge(snapshot.trace)
    return t


def _trace_since(snapshot: ManifestView, mark: AccessTrace) -> AccessTrace:
    out = AccessTrace(
        chunks_fetched=snapshot.trace.chunks_fetched - mark.chunks_fetched,
        bytes_read=snapshot.trace.bytes_read - mark.bytes_read,
    )
    out.per_path.update(snapshot.trace.per_path)
    out.per_path.subtract(mark.per_path)
    out.per_path = +out.per_path
    return out
