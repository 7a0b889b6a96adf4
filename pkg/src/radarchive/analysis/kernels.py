"""Arithmetic kernels shared by the store-backed workflows and the file-per-scan baseline.

Summation order is fixed: left to right over ray index (azimuthal means)
and over time index (accumulation), in 64-bit floats. Any caller feeding
the same samples in the same order gets bitwise-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError


@dataclass(frozen=True)
class ZrParams:
    """Power law ``Z = a * R**b`` (Z in mm^6/m^3, R in mm/h); Marshall-Palmer by default."""

    a: float = 200.0
    b: float = 1.6

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise InvalidArgumentError("Z-R coefficients must be positive")


MARSHALL_PALMER = ZrParams()
_LN10_OVER_10 = math.log(10.0) / 10.0


def dbz_to_rate(dbz, params: ZrParams = MARSHALL_PALMER):
    """Rain rate (mm/h) from reflectivity (dBZ): ``R = (10**(dBZ/10) / a) ** (1/b)``.

    NaN in, NaN out; elementwise over arrays, always evaluated in float64.
    The power law is evaluated as ``exp((ln(10)/10 * dBZ - ln(a)) / b)``,
    one vectorized exponential instead of two scalar-base powers; the two
    forms agree to a few ulps.
    """
    d = np.asarray(dbz, dtype=np.float64)
    if d.ndim:
        d = np.ascontiguousarray(d)
    r = np.exp((d * _LN10_OVER_10 - math.log(params.a)) / params.b)
    return r if r.ndim else float(r)


def rate_to_dbz(rate, params: ZrParams = MARSHALL_PALMER):
    r = np.asarray(rate, dtype=np.float64)
    out = 10.0 * np.log10(params.a * np.power(r, params.b))
    return out if out.ndim else float(out)


def azimuthal_sums(block: np.ndarray) -> tuple:
    """Per (time, gate) sum and count of finite samples over the ray axis.

    ``block`` is (time, ray, gate). Returns float64 sums and int64 counts,
    both (time, gate).
    """
    n_t, n_r, n_g = block.shape
    acc = np.zeros((n_t, n_g), dtype=np.float64)
    cnt = np.zeros((n_t, n_g), dtype=np.int64)
    x = np.empty((n_t, n_g), dtype=np.float64)
    finite = np.empty((n_t, n_g), dtype=bool)
    for i in range(n_r):
        x[...] = block[:, i, :]
        np.isfinite(x, out=finite)
        # acc + 0.0 == acc, so skipping non-finite samples equals adding zero
        np.add(acc, x, out=acc, where=finite)
        cnt += finite
    return acc, cnt


def qvp_from_sums(acc: np.ndarray, cnt: np.ndarray, n_rays: int, threshold: float) -> tuple:
    """``(values, valid_fraction)``; values NaN where the valid fraction is below ``threshold``."""
    frac = cnt / float(n_rays)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = acc / cnt
    values = np.where((cnt > 0) & (frac >= threshold), values, np.nan)
    return values, frac


class TrapezoidAccumulator:
    """Running trapezoidal time integral of rain rate with a max-gap cutoff.

    Feed scans in time order with :meth:`add`. An interval longer than
    ``max_gap_s`` contributes nothing; NaN reflectivity counts as 0 mm/h.
    Each interval adds ``0.5 * (R_prev + R) * (dt_s / 3600)`` to the totals.
    """

    def __init__(self, shape: tuple, params: ZrParams, max_gap_s: float):
        self.params = params
        self.max_gap_s = float(max_gap_s)
        self.total = np.zeros(shape, dtype=np.float64)
        self.valid = np.zeros(shape, dtype=np.int64)
        self.covered_s = 0.0
        self.n_scans = 0
        self._prev_rate = None
        self._prev_ns = None
        self._rate = np.empty(shape, dtype=np.float64)
        self._tmp = np.empty(shape, dtype=np.float64)
        self._finite = np.empty(shape, dtype=bool)

    @property
    def coverage(self) -> np.ndarray:
        """Seconds of included intervals, per gate (identical for every gate)."""
        return np.full(self.total.shape, self.covered_s)

    def add(self, time_ns: int, dbz: np.ndarray) -> None:
        rate, tmp, finite = self._rate, self._tmp, self._finite
        rate[...] = dbz
        np.isfinite(rate, out=finite)
        # R = exp((ln(10)/10 * dBZ - ln(a)) / b), as in dbz_to_rate
        rate *= _LN10_OVER_10
        rate -= math.log(self.params.a)
        rate /= self.params.b
        np.exp(rate, out=rate)
        rate[~finite] = 0.0
        self.valid += finite
        if self._prev_rate is not None:
            dt_s = (int(time_ns) - self._prev_ns) / 1e9
            if dt_s <= self.max_gap_s:
                np.add(self._prev_rate, rate, out=tmp)
                tmp *= 0.5
                tmp *= dt_s / 3600.0
                self.total += tmp
                self.covered_s += dt_s
            self._rate, self._prev_rate = self._prev_rate, rate
        else:
            self._prev_rate = rate
            self._rate = np.empty_like(rate)
        self._prev_ns = int(time_ns)
        self.n_scans += 1
