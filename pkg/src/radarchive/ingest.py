"""RDT-RAW sweep-file format, synthetic volume generator and archive scanning.

RDT-RAW layout (all multi-byte fields little-endian, no padding)::

    header (60 bytes)
        magic            4s   b"RDT1"
        format_version   u16  1
        site_id          8s   ASCII, space padded
        site_latitude    f64  degrees
        site_longitude   f64  degrees
        site_altitude    f32  metres
        vcp_name         16s  ASCII, space padded
        volume_time      i64  ns since 1970-01-01T00:00:00Z
        sweep_count      u16  >= 1
    sweep block, repeated sweep_count times
        elevation        f32  degrees
        n_rays           u16
        n_gates          u16
        range_start      f32  metres
        range_step       f32  metres
        moment_count     u8
        moment_count x (code 4s, n_rays*n_gates f32 ray-major; NaN = 0x7FC00000)
        azimuths         n_rays f32
        ray_time_offsets n_rays u32 milliseconds after volume_time

Moment codes on disk are four characters: ``DBZH``, ``VRAD`` (VRADH),
``ZDR `` (ZDR), ``RHHV`` (RHOHV) and ``PHDP`` (PHIDP).
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    EncodingError,
    FormatError,
    InvalidArgumentError,
    NotFoundError,
    TruncationError,
    UnknownMomentError,
)
from .model import (
    NAT,
    MomentKind,
    RadarSite,
    Sweep,
    SweepGeometry,
    VolumeScan,
    canonical_azimuths,
    to_ns,
)

log = logging.getLogger(__name__)

MAGIC = b"RDT1"
FORMAT_VERSION = 1
SUFFIX = ".rdt"

HEADER = struct.Struct("<4sH8sddf16sqH")
SWEEP_HEADER = struct.Struct("<fHHffB")
CODE_SIZE = 4

DISK_CODES = {
    MomentKind.DBZH: b"DBZH",
    MomentKind.VRADH: b"VRAD",
    MomentKind.ZDR: b"ZDR ",
    MomentKind.RHOHV: b"RHHV",
    MomentKind.PHIDP: b"PHDP",
}
_CODES_ON_DISK = {v: k for k, v in DISK_CODES.items()}

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


def sweep_block_size(n_rays: int, n_gates: int, moment_count: int) -> int:
    """Byte length of one sweep block."""
    per_moment = CODE_SIZE + 4 * n_rays * n_gates
    return SWEEP_HEADER.size + moment_count * per_moment + 4 * n_rays + 4 * n_rays


# --- decoding --------------------------------------------------------------------

class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def need(self, n: int, what: str) -> int:
        start = self.pos
        if start + n > len(self.buf):
            raise TruncationError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - start} available", start
            )
        self.pos = start + n
        return start


def _text(raw: bytes, what: str, offset: int) -> str:
    try:
        return raw.decode("ascii").rstrip(" ")
    except UnicodeDecodeError:
        raise FormatError(f"{what} is not ASCII text", offset) from None


def parse_rdt_header(buf) -> dict:
    """Decode and check the fixed 60-byte header."""
    r = _Reader(buf)
    r.need(HEADER.size, "header")
    magic, version, site_id, lat, lon, alt, vcp, t_ns, n_sweeps = HEADER.unpack_from(r.buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if n_sweeps < 1:
        raise FormatError("sweep_count must be at least 1", 58)
    return {
        "site_id": _text(site_id, "site id", 6),
        "latitude_deg": lat,
        "longitude_deg": lon,
        "altitude_m": alt,
        "vcp_name": _text(vcp, "vcp name", 34),
        "volume_time_ns": t_ns,
        "sweep_count": n_sweeps,
    }


def parse_rdt_raw(buf) -> VolumeScan:
    """Decode one RDT-RAW file image into a :class:`VolumeScan`.

    Parsing is strict: any byte left over after the declared structure is an
    error, as is any truncated field. Every :class:`FormatError` carries the
    byte offset where decoding failed.
    """
    head = parse_rdt_header(buf)
    r = _Reader(buf)
    r.pos = HEADER.size
    t0 = head["volume_time_ns"]
    sweeps = []
    for k in range(head["sweep_count"]):
        block_start = r.pos
        off = r.need(SWEEP_HEADER.size, f"sweep {k} header")
        elev, n_rays, n_gates, r0, dr, n_mom = SWEEP_HEADER.unpack_from(r.buf, off)
        if n_rays < 1 or n_gates < 1:
            raise FormatError(f"sweep {k} has no rays or gates", off + 4)
        if n_mom < 1:
            raise FormatError(f"sweep {k} has no moments", off + 16)
        if not dr > 0:
            raise FormatError(f"sweep {k} range step must be positive", off + 12)
        count = n_rays * n_gates
        moments = {}
        for _ in range(n_mom):
            off = r.need(CODE_SIZE, f"sweep {k} moment code")
            code = bytes(r.buf[off:off + CODE_SIZE])
            kind = _CODES_ON_DISK.get(code)
            if kind is None:
                raise UnknownMomentError(f"unknown moment code {code!r}", off)
            if kind in moments:
                raise FormatError(f"moment {kind.value} repeated in sweep {k}", off)
            off = r.need(4 * count, f"sweep {k} {kind.value} data")
            moments[kind] = np.frombuffer(buf, _F32, count, off).reshape(n_rays, n_gates)
        off = r.need(4 * n_rays, f"sweep {k} azimuths")
        az = np.frombuffer(buf, _F32, n_rays, off)
        if not np.all(np.isfinite(az)) or np.any(az < 0) or np.any(az >= 360):
            raise FormatError(f"sweep {k} azimuths outside [0, 360)", off)
        off = r.need(4 * n_rays, f"sweep {k} ray times")
        offsets_ms = np.frombuffer(buf, _U32, n_rays, off).astype(np.int64)
        ray_ns = t0 + offsets_ms * 1_000_000
        try:
            geo = SweepGeometry(elev, az, r0, dr, n_gates, ray_ns.view("datetime64[ns]"))
            sweeps.append(Sweep(geo, moments))
        except InvalidArgumentError as exc:
            raise FormatError(f"sweep {k}: {exc}", block_start) from None
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last sweep", r.pos)
    try:
        site = RadarSite(head["latitude_deg"], head["longitude_deg"], head["altitude_m"], head["site_id"])
        return VolumeScan(head["vcp_name"], t0, site, sweeps)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc), 0) from None


def read_rdt_file(path) -> VolumeScan:
    return parse_rdt_raw(Path(path).read_bytes())


# --- encoding --------------------------------------------------------------------

def _fixed_text(text: str, size: int, what: str) -> bytes:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        raise EncodingError(f"{what} {text!r} is not ASCII") from None
    if len(raw) > size:
        raise EncodingError(f"{what} {text!r} longer than {size} bytes")
    return raw.ljust(size, b" ")


def encode_rdt_raw(volume: VolumeScan) -> bytes:
    """Canonical RDT-RAW encoding of ``volume``; inverse of :func:`parse_rdt_raw`."""
    site = volume.site
    t0 = volume.time_ns
    parts = [HEADER.pack(
        MAGIC, FORMAT_VERSION,
        _fixed_text(site.site_id, 8, "site id"),
        site.latitude_deg, site.longitude_deg, site.altitude_m,
        _fixed_text(volume.vcp_name, 16, "vcp_name"),
        t0, len(volume.sweeps),
    )]
    if len(volume.sweeps) > 0xFFFF:
        raise EncodingError("too many sweeps")
    for k, sweep in enumerate(volume.sweeps):
        geo = sweep.geometry
        if geo.n_rays > 0xFFFF or geo.n_gates > 0xFFFF or len(sweep.moments) > 0xFF:
            raise EncodingError(f"sweep {k} dimensions exceed the format limits")
        parts.append(SWEEP_HEADER.pack(
            geo.elevation_deg, geo.n_rays, geo.n_gates,
            geo.range_start_m, geo.range_step_m, len(sweep.moments),
        ))
        for kind, values in sweep.moments.items():
            parts.append(DISK_CODES[kind])
            # canonical NaN is guaranteed by Sweep
            parts.append(np.ascontiguousarray(values, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(geo.azimuth_deg, dtype=_F32).tobytes())
        ray_ns = geo.ray_times.view(np.int64)
        if np.any(ray_ns == NAT):
            raise EncodingError(f"sweep {k} has rays without a timestamp")
        delta = ray_ns - t0
        if np.any(delta < 0) or np.any(delta % 1_000_000) or np.any(delta // 1_000_000 > 0xFFFFFFFF):
            raise EncodingError(f"sweep {k} ray times are not whole milliseconds within range of volume_time")
        parts.append((delta // 1_000_000).astype(_U32).tobytes())
    return b"".join(parts)


def write_rdt_file(volume: VolumeScan, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_rdt_raw(volume))
    return path


def default_filename(volume: VolumeScan) -> str:
    stamp = np.datetime_as_string(volume.volume_time, unit="s").replace("-", "").replace(":", "")
    return f"{volume.site.site_id or 'RADAR'}_{stamp}_{volume.vcp_name}{SUFFIX}"


# --- synthetic volumes -------------------------------------------------------------

@dataclass(frozen=True)
class VcpDefinition:
    name: str
    elevations_deg: tuple
    n_rays: Union[int, tuple] = 360
    n_gates: Union[int, tuple] = 500
    range_step_m: float = 250.0
    revisit_seconds: float = 300.0
    range_start_m: float = 125.0

    def __post_init__(self):
        object.__setattr__(self, "elevations_deg", tuple(float(e) for e in self.elevations_deg))
        if not self.elevations_deg:
            raise InvalidArgumentError("a VCP needs at least one elevation")
        n = len(self.elevations_deg)
        for attr in ("n_rays", "n_gates"):
            value = getattr(self, attr)
            values = (int(value),) * n if np.isscalar(value) else tuple(int(v) for v in value)
            if len(values) != n or min(values) < 1:
                raise InvalidArgumentError(f"{attr} must be positive, one per sweep")
            object.__setattr__(self, attr, values)
        if not self.range_step_m > 0 or not self.revisit_seconds > 0:
            raise InvalidArgumentError("range_step_m and revisit_seconds must be positive")


_OPERATIONAL_ELEVATIONS = (0.5, 0.9, 1.3, 1.8, 2.4, 3.1, 4.0, 5.1, 6.4, 8.0, 10.0, 12.5, 15.6, 19.5)

# Test fixtures with plausible operational numbers; not the official NEXRAD tables.
VCP_12 = VcpDefinition("VCP-12", _OPERATIONAL_ELEVATIONS, 360, 500, 250.0, 270.0)
VCP_212 = VcpDefinition("VCP-212", _OPERATIONAL_ELEVATIONS, 360, 500, 250.0, 300.0)
VCP_FIXTURES = {v.name: v for v in (VCP_12, VCP_212)}


@dataclass(frozen=True)
class ConstantField:
    value: float


@dataclass(frozen=True)
class GaussianStorm:
    """Gaussian reflectivity cell: ``peak_dbz * exp(-d**2 / (2 sigma**2))``.

    ``center_m`` is (east, north) of the cell at the configuration start time,
    relative to the radar; the cell drifts with ``advection_ms`` (east, north).
    """

    center_m: tuple = (0.0, 0.0)
    sigma_m: float = 10_000.0
    peak_dbz: float = 55.0
    advection_ms: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class NoiseField:
    mean: float = 20.0
    stddev: float = 5.0


FieldModel = Union[ConstantField, GaussianStorm, NoiseField]


@dataclass(frozen=True)
class SynthConfig:
    vcp: VcpDefinition
    n_volumes: int
    start_time: object
    seed: int = 0
    field_model: FieldModel = ConstantField(30.0)
    site: RadarSite = RadarSite(36.74, -98.13, 383.0, "KSYN")
    moments: tuple = ("DBZH",)
    azimuth_jitter_deg: float = 0.0
    quantization_db: float = 0.0

    def __post_init__(self):
        if int(self.n_volumes) < 1:
            raise InvalidArgumentError("n_volumes must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "moments", tuple(MomentKind.parse(m) for m in self.moments))
        object.__setattr__(self, "start_time", to_ns(self.start_time))
        if not 0 <= self.azimuth_jitter_deg < 180.0 / max(self.vcp.n_rays):
            raise InvalidArgumentError("azimuth jitter must stay below half a ray width")
        if not self.quantization_db >= 0:
            raise InvalidArgumentError("quantization_db must be non-negative")


def storm_dbz(storm: GaussianStorm, east_m, north_m, elapsed_s: float) -> np.ndarray:
    """Closed-form storm reflectivity (float64) at ground positions after ``elapsed_s`` seconds."""
    cx = storm.center_m[0] + storm.advection_ms[0] * elapsed_s
    cy = storm.center_m[1] + storm.advection_ms[1] * elapsed_s
    d2 = (np.asarray(east_m) - cx) ** 2 + (np.asarray(north_m) - cy) ** 2
    return storm.peak_dbz * np.exp(-d2 / (2.0 * storm.sigma_m ** 2))


def gate_ground_positions(azimuth_deg, range_m, elevation_deg):
    """(east, north) in metres of gate centres, flat projection ``r cos(el)``."""
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=np.float64))[:, None]
    ground = np.asarray(range_m, dtype=np.float64)[None, :] * np.cos(np.deg2rad(float(elevation_deg)))
    return ground * np.sin(az), ground * np.cos(az)


def _rng(seed: int, volume_index: int) -> np.random.Generator:
    # PCG64 keyed by (seed, volume index) so each volume is reproducible on its own
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(volume_index,))))


def _synth_sweep(config: SynthConfig, k: int, t_ns: int, elapsed_s: float, rng) -> Sweep:
    vcp = config.vcp
    n_rays, n_gates = vcp.n_rays[k], vcp.n_gates[k]
    az = canonical_azimuths(n_rays).astype(np.float64)
    if config.azimuth_jitter_deg:
        az = az + rng.uniform(-config.azimuth_jitter_deg, config.azimuth_jitter_deg, n_rays)
        az = np.mod(az, 360.0)
    az = az.astype(np.float32)
    sweep_ms = int(vcp.revisit_seconds * 1000) // len(vcp.elevations_deg)
    ray_ms = k * sweep_ms + (np.arange(n_rays, dtype=np.int64) * sweep_ms) // n_rays
    geo = SweepGeometry(
        vcp.elevations_deg[k], az, vcp.range_start_m, vcp.range_step_m, n_gates,
        (t_ns + ray_ms * 1_000_000).view("datetime64[ns]"),
    )
    model = config.field_model
    if isinstance(model, ConstantField):
        dbz = np.full((n_rays, n_gates), model.value, dtype=np.float64)
    elif isinstance(model, GaussianStorm):
        east, north = gate_ground_positions(geo.azimuth_deg, geo.range_m, geo.elevation_deg)
        dbz = storm_dbz(model, east, north, elapsed_s)
    elif isinstance(model, NoiseField):
        dbz = rng.normal(model.mean, model.stddev, (n_rays, n_gates))
    else:
        raise InvalidArgumentError(f"unknown field model {model!r}")
    if config.quantization_db:
        # operational archives store reflectivity in fixed steps (0.5 dB is typical)
        dbz = np.round(dbz / config.quantization_db) * config.quantization_db
    dbz = dbz.astype(np.float32)
    moments = {}
    for kind in config.moments:
        if kind is MomentKind.DBZH:
            moments[kind] = dbz
        elif kind is MomentKind.VRADH:
            u, v = model.advection_ms if isinstance(model, GaussianStorm) else (0.0, 0.0)
            rad = np.deg2rad(geo.azimuth_deg.astype(np.float64))[:, None]
            vr = (u * np.sin(rad) + v * np.cos(rad)) * np.cos(np.deg2rad(geo.elevation_deg))
            moments[kind] = np.broadcast_to(vr, (n_rays, n_gates)).astype(np.float32)
        elif kind is MomentKind.ZDR:
            moments[kind] = (np.float32(0.05) * dbz).astype(np.float32)
        elif kind is MomentKind.RHOHV:
            moments[kind] = np.full((n_rays, n_gates), 0.99, dtype=np.float32)
        elif kind is MomentKind.PHIDP:
            phi = np.arange(n_gates, dtype=np.float32) * np.float32(0.01)
            moments[kind] = np.broadcast_to(phi, (n_rays, n_gates)).astype(np.float32)
    return Sweep(geo, moments)


def generate_synthetic(config: SynthConfig) -> list:
    """Deterministic synthetic volumes; a pure function of ``config`` (seed included).

    Volume ``i`` starts at ``start_time + i * revisit_seconds``. Random draws use
    PCG64 seeded from ``(seed, i)``.
    """
    volumes = []
    step_ns = int(round(config.vcp.revisit_seconds * 1e9))
    for i in range(int(config.n_volumes)):
        t_ns = config.start_time + i * step_ns
        rng = _rng(config.seed, i)
        elapsed = i * config.vcp.revisit_seconds
        sweeps = [_synth_sweep(config, k, t_ns, elapsed, rng) for k in range(len(config.vcp.elevations_deg))]
        volumes.append(VolumeScan(config.vcp.name, t_ns, config.site, sweeps))
    return volumes


def write_synthetic(config: SynthConfig, directory) -> list:
    """Generate volumes for ``config`` and write one ``.rdt`` file each; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for volume in generate_synthetic(config):
        paths.append(write_rdt_file(volume, directory / default_filename(volume)))
    return paths


def _parse_field(doc) -> FieldModel:
    if isinstance(doc, (ConstantField, GaussianStorm, NoiseField)):
        return doc
    if isinstance(doc, (int, float)):
        return ConstantField(float(doc))
    doc = dict(doc)
    kind = doc.pop("kind", doc.pop("type", None))
    if kind == "constant":
        return ConstantField(float(doc["value"]))
    if kind == "gaussian_storm":
        return GaussianStorm(
            center_m=tuple(float(c) for c in doc.get("center_m", (0.0, 0.0))),
            sigma_m=float(doc.get("sigma_m", 10_000.0)),
            peak_dbz=float(doc.get("peak_dbz", 55.0)),
            advection_ms=tuple(float(c) for c in doc.get("advection_ms", (0.0, 0.0))),
        )
    if kind == "noise":
        return NoiseField(float(doc.get("mean", 20.0)), float(doc.get("stddev", 5.0)))
    raise InvalidArgumentError(f"unknown field model kind {kind!r}")


def synth_config_from_mapping(doc: dict) -> SynthConfig:
    """Build a :class:`SynthConfig` from a key/value document.

    Keys: ``vcp`` (fixture name or a mapping of :class:`VcpDefinition` fields),
    ``n_volumes``, ``start_time`` (RFC 3339), ``seed``, ``field`` (mapping with
    ``kind`` in {constant, gaussian_storm, noise} plus its parameters),
    ``moments`` (list of codes), ``site`` (latitude_deg, longitude_deg,
    altitude_m, site_id), ``azimuth_jitter_deg`` and ``quantization_db``.
    """
    doc = dict(doc)
    vcp = doc.get("vcp", "VCP-212")
    if isinstance(vcp, str):
        if vcp not in VCP_FIXTURES:
            raise InvalidArgumentError(f"unknown VCP fixture {vcp!r}")
        vcp = VCP_FIXTURES[vcp]
    elif not isinstance(vcp, VcpDefinition):
        vcp = VcpDefinition(**vcp)
    kwargs = dict(
        vcp=vcp,
        n_volumes=int(doc.get("n_volumes", 1)),
        start_time=doc.get("start_time", "2011-05-20T00:00:00Z"),
        seed=int(doc.get("seed", 0)),
        field_model=_parse_field(doc.get("field", {"kind": "constant", "value": 30.0})),
        moments=tuple(doc.get("moments", ("DBZH",))),
        azimuth_jitter_deg=float(doc.get("azimuth_jitter_deg", 0.0)),
        quantization_db=float(doc.get("quantization_db", 0.0)),
    )
    if "site" in doc:
        kwargs["site"] = RadarSite(**doc["site"])
    return SynthConfig(**kwargs)


# --- archive scanning -------------------------------------------------------------

class ArchiveScanWarning(UserWarning):
    """A file in an archive directory could not be read and was skipped."""


def inspect_rdt_file(path) -> dict:
    """Check a file's header and block structure without decoding its arrays.

    Only block headers are read; returns the decoded header. Raises
    :class:`FormatError` when the declared structure does not match the file.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = parse_rdt_header(fh.read(HEADER.size))
        pos = HEADER.size
        for k in range(head["sweep_count"]):
            fh.seek(pos)
            raw = fh.read(SWEEP_HEADER.size)
            if len(raw) < SWEEP_HEADER.size:
                raise TruncationError(f"truncated sweep {k} header", pos)
            _, n_rays, n_gates, _, _, n_mom = SWEEP_HEADER.unpack(raw)
            end = pos + sweep_block_size(n_rays, n_gates, n_mom)
            if end > size:
                raise TruncationError(f"sweep {k} block extends past end of file", pos)
            pos = end
    if pos != size:
        raise FormatError(f"{size - pos} trailing bytes after last sweep", pos)
    return head


def scan_archive_dir(directory) -> list:
    """List ``(volume_time, path)`` for every readable ``.rdt`` file in ``directory``.

    Entries are ordered by the header volume time, then by file name.
    Unreadable or malformed files are skipped with an
    :class:`ArchiveScanWarning` rather than aborting the scan.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFoundError(f"archive directory {str(directory)!r} does not exist")
    entries = []
    for path in sorted(directory.iterdir()):
        if path.suffix != SUFFIX or not path.is_file():
            continue
        try:
            head = inspect_rdt_file(path)
        except (FormatError, OSError) as exc:
            warnings.warn(f"skipping {path.name}: {exc}", ArchiveScanWarning, stacklevel=2)
            log.warning("skipping %s: %s", path, exc)
            continue
        entries.append((np.datetime64(head["volume_time_ns"], "ns"), path))
    entries.sort(key=lambda e: (int(e[0].astype(np.int64)), e[1].name))
    return entries
