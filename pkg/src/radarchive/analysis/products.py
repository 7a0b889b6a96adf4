"""Serialization of analysis products.

Binary layout (little-endian)::

    magic        4s   b"RDTP"
    version      u32  1
    header_len   u64  length of the JSON header in bytes
    header       UTF-8 JSON: {"product": ..., "attrs": {...},
                 "arrays": [{"name", "dtype", "shape", "offset"}, ...]}
    payloads     raw array bytes; offsets are relative to the end of the header

Arrays are 64-bit (``<f8`` or ``<i8``). The header carries only
product-defining metadata (no snapshot id, no timings), so the same query
over the same data yields a byte-identical file.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidArgumentError
from .workflows import AccumulationGrid, QvpProfile, TimeSeries

PRODUCT_MAGIC = b"RDTP"
PRODUCT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
FORMATS = ("csv", "bin", "json")


def product_content(product) -> tuple:
    """``(kind, attrs, arrays)`` describing ``product``; arrays in a fixed order."""
    if isinstance(product, QvpProfile):
        attrs = {
            "vcp_name": product.vcp_name, "sweep_index": product.sweep_index, "moment": product.moment,
            "threshold": product.threshold,
        }
        arrays = {
            "time": product.times, "range_m": product.range_m, "height_m": product.height_m,
            "values": product.values, "valid_fraction": product.valid_fraction,
        }
        return "qvp", attrs, arrays
    if isinstance(product, AccumulationGrid):
        attrs = {
            "vcp_name": product.vcp_name, "sweep_index": product.sweep_index, "n_scans": product.n_scans,
            "time_start": product.time_start, "time_end": product.time_end,
            "zr_a": product.params.a, "zr_b": product.params.b, "max_gap_s": product.max_gap_s,
        }
        arrays = {
            "azimuth_deg": product.azimuth_deg, "range_m": product.range_m, "totals": product.totals,
            "coverage_seconds": product.coverage_seconds, "valid_fraction": product.valid_fraction,
        }
        return "qpe", attrs, arrays
    if isinstance(product, TimeSeries):
        attrs = {
            "vcp_name": product.vcp_name, "sweep_index": product.sweep_index, "moment": product.moment,
            "target_latitude_deg": product.target.latitude_deg,
            "target_longitude_deg": product.target.longitude_deg,
        }
        arrays = {
            "time": product.times, "values": product.values,
            "ray_index": np.array([p.ray_index for p in product.pointers], dtype=np.int64),
            "gate_index": np.array([p.gate_index for p in product.pointers], dtype=np.int64),
        }
        return "timeseries", attrs, arrays
    raise InvalidArgumentError(f"not an analysis product: {type(product).__name__}")


def _as64(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind in "iu":
        return a.astype("<i8")
    return a.astype("<f8")


def encode_product(product) -> bytes:
    return encode_container(*product_content(product))


def encode_container(kind: str, attrs: dict, arrays: dict) -> bytes:
    """Binary image holding named arrays (widened to 64 bits) under a JSON header."""
    entries, payloads, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(_as64(a))
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"product": kind, "attrs": attrs, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(PRODUCT_MAGIC, PRODUCT_VERSION, len(header)) + header + b"".join(payloads)


def decode_product(data: bytes) -> tuple:
    """``(kind, attrs, {name: array})`` from a binary product image."""
    if len(data) < _PREFIX.size:
        raise FormatError("product file shorter than its prefix", 0)
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != PRODUCT_MAGIC:
        raise FormatError(f"bad product magic {magic!r}", 0)
    if version != PRODUCT_VERSION:
        raise FormatError(f"unsupported product version {version}", 4)
    start = _PREFIX.size + hlen
    if start > len(data):
        raise FormatError("product header truncated", _PREFIX.size)
    header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = start + e["offset"] + count * dtype.itemsize
        if end > len(data):
            raise FormatError(f"array {e['name']!r} truncated", start + e["offset"])
        arrays[e["name"]] = np.frombuffer(data, dtype, count, start + e["offset"]).reshape(e["shape"])
    return header["product"], header["attrs"], arrays


def _cell(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(int(x))


def product_csv(product) -> str:
    """Long-format CSV: one row per sample, floats written with ``repr`` (round-trippable)."""
    kind, attrs, arrays = product_content(product)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if kind == "qvp":
        w.writerow(["time_ns", "range_m", "height_m", "value", "valid_fraction"])
        for i, t in enumerate(arrays["time"]):
            for g, r in enumerate(arrays["range_m"]):
                w.writerow([_cell(t), _cell(r), _cell(arrays["height_m"][g]),
                            _cell(arrays["values"][i, g]), _cell(arrays["valid_fraction"][i, g])])
    elif kind == "qpe":
        w.writerow(["azimuth_deg", "range_m", "total_mm", "coverage_seconds", "valid_fraction"])
        for a, az in enumerate(arrays["azimuth_deg"]):
            for g, r in enumerate(arrays["range_m"]):
                w.writerow([_cell(az), _cell(r), _cell(arrays["totals"][a, g]),
                            _cell(arrays["coverage_seconds"][a, g]), _cell(arrays["valid_fraction"][a, g])])
    else:
        w.writerow(["time_ns", "value", "ray_index", "gate_index"])
        for i, t in enumerate(arrays["time"]):
            w.writerow([_cell(t), _cell(arrays["values"][i]), _cell(arrays["ray_index"][i]),
                        _cell(arrays["gate_index"][i])])
    return out.getvalue()


def _json_value(a: np.ndarray):
    if a.dtype.kind == "f":
        return [None if not np.isfinite(x) else float(x) for x in a.ravel()] if a.ndim <= 1 else [
            _json_value(row) for row in a]
    return a.tolist()


def product_json(product) -> str:
    """JSON document with attrs and nested lists; NaN written as ``null``."""
    kind, attrs, arrays = product_content(product)
    doc = {"product": kind, "attrs": attrs, "arrays": {k: _json_value(_as64(v)) for k, v in arrays.items()}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def write_product(product, path, fmt: str = "bin") -> Path:
    path = Path(path)
    if fmt == "bin":
        path.write_bytes(encode_product(product))
    elif fmt == "csv":
        path.write_text(product_csv(product), encoding="utf-8")
    elif fmt == "json":
        path.write_text(product_json(product), encoding="utf-8")
    else:
        raise InvalidArgumentError(f"unknown product format {fmt!r}; expected one of {FORMATS}")
    return path


def read_product(path) -> tuple:
    return decode_product(Path(path).read_bytes())


def products_equal(a, b) -> bool:
    """Bitwise equality of two products' arrays and attributes."""
    return encode_product(a) == encode_product(b)
