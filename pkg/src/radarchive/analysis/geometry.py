"""Beam propagation and site-relative geolocation on a spherical earth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, OutOfCoverageError

EARTH_RADIUS_M = 6_371_000.0
EFFECTIVE_RADIUS_M = 4.0 / 3.0 * EARTH_RADIUS_M


def beam_height(range_m, elevation_deg, site_altitude_m=0.0):
    """Beam-centre height above sea level under the 4/3 effective-earth-radius model.

    ``h = sqrt(r**2 + R**2 + 2 r R sin(el)) - R + site_altitude`` with
    ``R = 4/3 * 6371 km``. The square root is evaluated as
    ``hypot(r + R sin(el), R cos(el))``, which is algebraically identical and
    exact for vertical beams.

    Parameters
    ----------
    range_m : float or array
        Slant range to the gate centre, in m (>= 0).
    elevation_deg : float or array
        Beam elevation angle, in degrees.
    site_altitude_m : float
        Antenna altitude above sea level, in m.
    """
    r = np.asarray(range_m, dtype=np.float64)
    if np.any(r < 0):
        raise InvalidArgumentError("slant range must be non-negative")
    el = np.deg2rad(np.asarray(elevation_deg, dtype=np.float64))
    re = EFFECTIVE_RADIUS_M
    h = np.hypot(r + re * np.sin(el), re * np.cos(el)) - re + float(site_altitude_m)
    return h if h.ndim else float(h)


def slant_range_for_ground(ground_m: float, elevation_deg: float) -> float:
    """Slant range whose beam lies above ground distance ``ground_m`` (4/3 model)."""
    phi = ground_m / EFFECTIVE_RADIUS_M
    denom = math.cos(math.radians(elevation_deg) + phi)
    if denom <= 0:
        raise OutOfCoverageError("beam never reaches that ground distance")
    return EFFECTIVE_RADIUS_M * math.sin(phi) / denom


def ground_range_for_slant(range_m, elevation_deg):
    """Ground distance under a beam at slant range ``range_m`` (4/3 model)."""
    r = np.asarray(range_m, dtype=np.float64)
    el = math.radians(float(elevation_deg))
    h = beam_height(r, elevation_deg, 0.0)
    return EFFECTIVE_RADIUS_M * np.arcsin(r * math.cos(el) / (EFFECTIVE_RADIUS_M + h))


@dataclass(frozen=True)
class GeoPoint:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float | None = None

    def __post_init__(self):
        if not abs(self.latitude_deg) <= 90.0:
            raise InvalidArgumentError(f"latitude {self.latitude_deg} outside [-90, 90]")
        lon = (float(self.longitude_deg) + 180.0) % 360.0 - 180.0
        object.__setattr__(self, "latitude_deg", float(self.latitude_deg))
        object.__setattr__(self, "longitude_deg", lon)


def great_circle(lat1, lon1, lat2, lon2) -> tuple:
    """(distance m, initial bearing deg in [0, 360)) on a sphere of radius 6371 km."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    dist = 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))
    y = math.sin(dl) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    bearing = math.degrees(math.atan2(y, x)) % 360.0
    return dist, bearing


def destination(lat, lon, bearing_deg, distance_m) -> tuple:
    """Point reached from (lat, lon) along ``bearing_deg`` after ``distance_m``."""
    d = distance_m / EARTH_RADIUS_M
    p1, l1, b = math.radians(lat), math.radians(lon), math.radians(bearing_deg)
    p2 = math.asin(math.sin(p1) * math.cos(d) + math.cos(p1) * math.sin(d) * math.cos(b))
    l2 = l1 + math.atan2(math.sin(b) * math.sin(d) * math.cos(p1), math.cos(d) - math.sin(p1) * math.sin(p2))
    return math.degrees(p2), (math.degrees(l2) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GatePointer:
    sweep_index: int
    ray_index: int
    gate_index: int
    slant_range_m: float
    bearing_deg: float
    beam_height_m: float


def nearest_ray(azimuth_deg, bearing_deg: float) -> int:
    """Ray whose centre is circularly closest to ``bearing_deg``; ties go to the lower index."""
    az = np.asarray(azimuth_deg, dtype=np.float64)
    diff = np.abs(az - bearing_deg) % 360.0
    return int(np.argmin(np.minimum(diff, 360.0 - diff)))


def locate_gate(site, geometry, target: GeoPoint, sweep_index: int = 0) -> GatePointer:
    """Nearest gate of a sweep to a ground location (no interpolation).

    ``site`` needs ``latitude_deg``, ``longitude_deg`` and ``altitude_m`` (a
    :class:`~radarchive.model.RadarSite`); ``geometry`` needs
    ``azimuth_deg``, ``range_start_m``, ``range_step_m``, ``n_gates`` and
    ``elevation_deg`` (a :class:`~radarchive.model.SweepGeometry`).
    """
    dist, bearing = great_circle(site.latitude_deg, site.longitude_deg, target.latitude_deg, target.longitude_deg)
    start, step, n_gates = float(geometry.range_start_m), float(geometry.range_step_m), int(geometry.n_gates)
    elevation = float(geometry.elevation_deg)
    max_range = start + n_gates * step
    try:
        slant = slant_range_for_ground(dist, elevation)
    except OutOfCoverageError:
        raise OutOfCoverageError(f"target {dist:.0f} m away is beyond the sweep's coverage") from None
    if slant > max_range:
        raise OutOfCoverageError(f"target at slant range {slant:.0f} m is beyond the maximum range {max_range:.0f} m")
    ray = nearest_ray(geometry.azimuth_deg, bearing)
    gate = min(max(int(round((slant - start) / step)), 0), n_gates - 1)
    return GatePointer(
        sweep_index=int(sweep_index), ray_index=ray, gate_index=gate, slant_range_m=slant,
        bearing_deg=bearing, beam_height_m=beam_height(slant, elevation, site.altitude_m),
    )
