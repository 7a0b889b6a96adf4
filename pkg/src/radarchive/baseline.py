"""File-per-scan reference pipeline for the analysis workflows.

Each query opens and fully decodes every raw file of the archive, one at a
time, with no index and no cache, then maps the needed sweep onto the
canonical grids and folds it into the same 64-bit kernels used by the
store-backed workflows. It is the benchmark baseline and doubles as an
equivalence reference for the store path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .analysis.geometry import GeoPoint, beam_height, locate_gate
from .analysis.kernels import MARSHALL_PALMER, TrapezoidAccumulator, ZrParams, azimuthal_sums, qvp_from_sums
from .analysis.workflows import (
    DEFAULT_MAX_GAP_S,
    DEFAULT_THRESHOLD,
    AccumulationGrid,
    QvpProfile,
    TimeSeries,
    sweep_geometry_at,
    time_bounds,
)
from .errors import InsufficientDataError, InvalidArgumentError, NotFoundError
from .ingest import read_rdt_file, scan_archive_dir
from .model import DEFAULT_N_RAYS, GroupGrid, MomentKind, align_range, canonical_azimuths, canonicalize_azimuths


def _volumes(raw_dir, vcp_name: str, time_range):
    """Decode the archive's files in time order, yielding the selected volumes of ``vcp_name``."""
    lo, hi = time_bounds(time_range)
    for _, path in scan_archive_dir(Path(raw_dir)):
        volume = read_rdt_file(path)
        if volume.vcp_name != vcp_name:
            continue
        t = volume.time_ns
        if (lo is not None and t < lo) or (hi is not None and t > hi):
            continue
        yield volume


class _CanonicalSweeps:
    """Canonical (rays x gates) slices of one sweep, on the grid fixed by the first volume seen."""

    def __init__(self, sweep_index: int, n_rays: int):
        self.k = int(sweep_index)
        self.n_rays = int(n_rays)
        self.grid = None

    def __call__(self, volume, moment: MomentKind):
        if self.k >= len(volume.sweeps):
            raise NotFoundError(f"{volume.vcp_name}: no sweep {self.k}")
        if self.grid is None:
            self.grid = GroupGrid.from_volume(volume, self.n_rays).sweeps[self.k]
        sweep = canonicalize_azimuths(volume.sweeps[self.k], self.n_rays)
        values = sweep.moments.get(moment)
        if values is None:
            values = np.full((self.n_rays, self.grid.range.n_gates), np.nan, dtype=np.float32)
        else:
            values = align_range(values, sweep.geometry, self.grid.range, f"{volume.vcp_name}/sweep_{self.k}")
        return sweep.geometry.elevation_deg, values


def baseline_qvp(raw_dir, vcp_name: str, sweep_index: int, moment, time_range=None,
                 threshold: float = DEFAULT_THRESHOLD, n_rays: int = DEFAULT_N_RAYS) -> QvpProfile:
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError("valid-fraction threshold must lie in [0, 1]")
    kind = MomentKind.parse(moment)
    canon = _CanonicalSweeps(sweep_index, n_rays)
    times, elevations, values, fractions = [], [], [], []
    for volume in _volumes(raw_dir, vcp_name, time_range):
        elev, data = canon(volume, kind)
        acc, cnt = azimuthal_sums(data[None])
        v, f = qvp_from_sums(acc, cnt, n_rays, threshold)
        times.append(volume.time_ns)
        elevations.append(elev)
        values.append(v)
        fractions.append(f)
    if not times:
        raise InsufficientDataError(f"{vcp_name}/sweep_{sweep_index}: no scans in the selected time range")
    site = volume.site
    range_m = canon.grid.range.values
    elevation = float(np.median(np.asarray(elevations, dtype=np.float32).astype(np.float64)))
    return QvpProfile(
        vcp_name=vcp_name, sweep_index=int(sweep_index), moment=kind.value,
        times=np.asarray(times, dtype=np.int64), range_m=range_m,
        height_m=np.asarray(beam_height(range_m, elevation, site.altitude_m)),
        values=np.concatenate(values), valid_fraction=np.concatenate(fractions), threshold=float(threshold),
    )


def baseline_qpe(raw_dir, vcp_name: str, sweep_index: int, time_range=None, params: ZrParams = MARSHALL_PALMER,
                 max_gap_s: float = DEFAULT_MAX_GAP_S, n_rays: int = DEFAULT_N_RAYS) -> AccumulationGrid:
    if not max_gap_s > 0:
        raise InvalidArgumentError("max gap must be positive")
    canon = _CanonicalSweeps(sweep_index, n_rays)
    acc = None
    first = last = None
    for volume in _volumes(raw_dir, vcp_name, time_range):
        _, data = canon(volume, MomentKind.DBZH)
        if acc is None:
            acc = TrapezoidAccumulator(data.shape, params, max_gap_s)
            first = volume.time_ns
        acc.add(volume.time_ns, data)
        last = volume.time_ns
    n = 0 if acc is None else acc.n_scans
    if n < 2:
        raise InsufficientDataError(f"{vcp_name}/sweep_{sweep_index}: accumulation needs at least 2 scans, found {n}")
    return AccumulationGrid(
        vcp_name=vcp_name, sweep_index=int(sweep_index), azimuth_deg=canonical_azimuths(n_rays),
        range_m=canon.grid.range.values, totals=acc.total, coverage_seconds=acc.coverage,
        valid_fraction=acc.valid / float(n), n_scans=n, time_start=first, time_end=last,
        params=params, max_gap_s=float(max_gap_s),
    )


def baseline_timeseries(raw_dir, vcp_name: str, sweep_index: int, moment, target: GeoPoint, time_range=None,
                        n_rays: int = DEFAULT_N_RAYS) -> TimeSeries:
    kind = MomentKind.parse(moment)
    canon = _CanonicalSweeps(sweep_index, n_rays)
    azimuth = canonical_azimuths(n_rays)
    times, values, pointers = [], [], []
    for volume in _volumes(raw_dir, vcp_name, time_range):
        elev, data = canon(volume, kind)
        rg = canon.grid.range
        geo = sweep_geometry_at(azimuth, rg.start_m, rg.step_m, rg.n_gates, elev)
        p = locate_gate(volume.site, geo, target, sweep_index)
        times.append(volume.time_ns)
        values.append(float(data[p.ray_index, p.gate_index]))
        pointers.append(p)
    return TimeSeries(
        vcp_name=vcp_name, sweep_index=int(sweep_index), moment=kind.value, target=target,
        times=np.asarray(times, dtype=np.int64), values=np.asarray(values, dtype=np.float64), pointers=pointers,
    )
