"""Command-line interface: ``radarchive <command> [options]``.

Every invocation writes one JSON run report to stderr (``--report quiet``
suppresses it) and exits with a fixed code:

    0 ok, 2 bad input, 3 conflict, 4 unknown path, 5 invalid rollback,
    6 benchmark invalid, 1 internal error.

Options may also come from a YAML key/value file given with ``--config``;
keys are option names (``time-start`` or ``time_start``) and explicit flags
win over file values.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .analysis.geometry import GeoPoint
from .analysis.kernels import ZrParams
from .analysis.products import FORMATS, encode_container, encode_product, product_csv, product_json
from .analysis.workflows import DEFAULT_MAX_GAP_S, DEFAULT_THRESHOLD, accumulate_qpe, extract_timeseries, qvp
from .baseline import baseline_qpe, baseline_qvp, baseline_timeseries
from .chunkstore import ChunkPolicy
from .errors import (
    CodecError,
    ConflictError,
    CorruptFrameError,
    CorruptObjectError,
    InvalidRollbackError,
    NotFoundError,
    ObjectNotFoundError,
    PathNotFoundError,
    RadarArchiveError,
    UnknownSnapshotError,
)
from .ingest import VCP_FIXTURES, VcpDefinition, synth_config_from_mapping, write_synthetic
from .model import TreePath
from .pipeline import append_paths, ingest_directory
from .txn import DEFAULT_BRANCH, Repository

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CONFLICT = 3
EXIT_PATH = 4
EXIT_ROLLBACK = 5
EXIT_BENCH_INVALID = 6

BITWISE_EQUAL = "bitwise-equal"


class BenchInvalid(RadarArchiveError):
    """Store and baseline products differ, or the store could not serve the query."""


@dataclass
class RunReport:
    command: str
    parameters: dict
    snapshot_read: Optional[str] = None
    snapshot_written: Optional[str] = None
    wall_time_s: float = 0.0
    chunks_fetched: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    exit_status: int = EXIT_OK
    error: Optional[str] = None
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)


@dataclass
class BenchResult:
    task: str
    baseline_seconds: float
    store_seconds: float
    speedup: Optional[float]
    volumes: int
    raw_bytes: int
    store_bytes: int
    equality: str

    @property
    def valid(self) -> bool:
        return self.equality == BITWISE_EQUAL


# --- option handling ------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _common(p: argparse.ArgumentParser, *, write: bool = False, query: bool = False, output: bool = False) -> None:
    p.add_argument("--config", help="YAML file of option defaults (flags win)")
    p.add_argument("--repo", default=os.environ.get("RDT_REPO"), help="repository directory (default: $RDT_REPO)")
    p.add_argument("--branch", default=DEFAULT_BRANCH)
    p.add_argument("--report", choices=("json", "quiet"), default="json", help="run report on stderr")
    p.add_argument("--no-fsync", action="store_true", help="skip fsync calls (faster, not crash safe)")
    if write:
        p.add_argument("--message", default=None)
        p.add_argument("--author", default=os.environ.get("USER", ""))
        p.add_argument("--timestamp", default=None, help="commit time, RFC 3339 (default: now)")
    if query:
        p.add_argument("--ref", default=None, help="branch or snapshot id to read (default: --branch)")
        p.add_argument("--time-start", default=None, help="inclusive start, RFC 3339")
        p.add_argument("--time-end", default=None, help="inclusive end, RFC 3339")
    if output:
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("--format", choices=FORMATS, default="csv")


def _sweep_args(p: argparse.ArgumentParser, moment: bool = True) -> None:
    p.add_argument("--vcp", default="VCP-212")
    p.add_argument("--sweep", type=int, default=0)
    if moment:
        p.add_argument("--moment", default="DBZH")


def _zr_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--zr-a", type=float, default=200.0)
    p.add_argument("--zr-b", type=float, default=1.6)
    p.add_argument("--max-gap", type=float, default=DEFAULT_MAX_GAP_S, help="seconds")


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(prog="radarchive", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", help="load a directory of .rdt files as one commit")
    p.add_argument("input_dir")
    _common(p, write=True)
    p.add_argument("--chunk-time", type=int, default=32, help="time extent of moment chunks")
    p.add_argument("--codec", choices=("zlib", "raw"), default="zlib")
    p.add_argument("--level", type=int, default=1, help="zlib level")

    p = subs["append"] = sub.add_parser("append", help="append .rdt files to a branch")
    p.add_argument("files", nargs="+")
    _common(p, write=True)
    p.add_argument("--max-attempts", type=int, default=16)

    p = subs["tree"] = sub.add_parser("tree", help="list groups and arrays")
    p.add_argument("path", nargs="?", default="")
    _common(p, query=True)

    p = subs["get"] = sub.add_parser("get", help="print a group's metadata or an array region")
    p.add_argument("path")
    _common(p, query=True, output=True)
    p.add_argument("--time", default=None, help="time index i or range i:j")
    p.add_argument("--azimuth", default=None, help="ray index i or range i:j")
    p.add_argument("--range", dest="range_", default=None, help="gate index i or range i:j")

    p = subs["qvp"] = sub.add_parser("qvp", help="quasi-vertical profile")
    _common(p, query=True, output=True)
    _sweep_args(p)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)

    p = subs["qpe"] = sub.add_parser("qpe", help="rainfall accumulation from DBZH")
    _common(p, query=True, output=True)
    _sweep_args(p, moment=False)
    _zr_args(p)

    p = subs["timeseries"] = sub.add_parser("timeseries", help="moment values at a ground location")
    _common(p, query=True, output=True)
    _sweep_args(p)
    p.add_argument("--lat", type=float, required=False)
    p.add_argument("--lon", type=float, required=False)

    p = subs["log"] = sub.add_parser("log", help="branch history, newest first")
    _common(p)

    p = subs["rollback"] = sub.add_parser("rollback", help="commit an ancestor's content as the new head")
    p.add_argument("snapshot")
    _common(p, write=True)

    p = subs["bench"] = sub.add_parser("bench", help="store vs file-per-scan timing with equality check")
    p.add_argument("task", choices=("qvp", "qpe", "timeseries"))
    _common(p, query=True)
    p.add_argument("--raw-dir", required=False)
    _sweep_args(p)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    _zr_args(p)
    p.add_argument("--lat", type=float, default=None)
    p.add_argument("--lon", type=float, default=None)
    p.add_argument("--repeat", type=int, default=1, help="timed runs per path; the fastest counts")

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic .rdt fixture")
    p.add_argument("out_dir")
    p.add_argument("--config", help="YAML file of option defaults (flags win)")
    p.add_argument("--report", choices=("json", "quiet"), default="json")
    p.add_argument("--vcp", default="VCP-212")
    p.add_argument("--volumes", type=int, default=10)
    p.add_argument("--start-time", default="2011-05-20T00:00:00Z")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--field", choices=("constant", "gaussian_storm", "noise"), default="constant")
    p.add_argument("--value", type=float, default=30.0, help="dBZ of the constant field")
    p.add_argument("--moments", default="DBZH", help="comma-separated moment codes")
    p.add_argument("--jitter", type=float, default=0.0, help="azimuth jitter, degrees")
    p.add_argument("--quantization-db", type=float, default=0.0)
    p.add_argument("--elevations", default=None, help="comma-separated degrees (overrides the VCP's)")
    p.add_argument("--n-gates", type=int, default=None)
    p.add_argument("--range-step", type=float, default=None)
    p.add_argument("--revisit", type=float, default=None, help="seconds between volumes")
    return parser, subs


def _config_defaults(path: str, sub: argparse.ArgumentParser) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a key/value mapping")
    known = {a.dest: a for a in sub._actions}
    aliases = {}
    for a in sub._actions:
        for opt in a.option_strings:
            aliases[opt.lstrip("-").replace("-", "_")] = a.dest
    out = {}
    for key, value in doc.items():
        dest = aliases.get(str(key).replace("-", "_"), str(key).replace("-", "_"))
        if dest not in known:
            raise ValueError(f"config key {key!r} is not an option of this command")
        out[dest] = value
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = subs[args.command]
        sub.set_defaults(**_config_defaults(args.config, sub))
        args = parser.parse_args(argv)
    return args


# --- helpers ------------------------------------------------------------------------------------

def _repo(args) -> Repository:
    if not args.repo:
        raise _InputError("no repository given (use --repo or set RDT_REPO)")
    return Repository.open(args.repo, fsync=not args.no_fsync)


class _InputError(RadarArchiveError):
    pass


def _time_range(args):
    if args.time_start is None and args.time_end is None:
        return None
    return (args.time_start, args.time_end)


def _read_ref(args) -> str:
    return args.ref or args.branch


def _index(text: Optional[str]):
    if text is None:
        return slice(None)
    if ":" in text:
        a, b = text.split(":", 1)
        return slice(int(a) if a else None, int(b) if b else None)
    return int(text)


def _emit(args, text: Optional[str] = None, data: Optional[bytes] = None) -> None:
    out = getattr(args, "out", None)
    if out:
        if data is not None:
            Path(out).write_bytes(data)
        else:
            Path(out).write_text(text, encoding="utf-8")
    elif data is not None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        sys.stdout.write(text)


def _emit_product(args, product) -> None:
    if args.format == "bin":
        _emit(args, data=encode_product(product))
    elif args.format == "json":
        _emit(args, product_json(product))
    else:
        _emit(args, product_csv(product))


def _note_trace(report: RunReport, trace) -> None:
    report.chunks_fetched += trace.chunks_fetched
    report.bytes_read += trace.bytes_read
    report.details["chunks_per_path"] = dict(sorted(trace.per_path.items()))


def _commit_meta(args, default_message: str) -> tuple:
    return args.message or default_message, args.author or "", args.timestamp or _now()


# --- commands ----------------------------------------------------------------------------------

def cmd_ingest(args, report: RunReport) -> int:
    if not args.repo:
        raise _InputError("no repository given (use --repo or set RDT_REPO)")
    repo = Repository.open_or_init(args.repo, fsync=not args.no_fsync)
    policy = ChunkPolicy(time=args.chunk_time, codec=args.codec, level=args.level)
    try:
        report.snapshot_read = repo.head(args.branch)
    except NotFoundError:
        pass
    message, author, ts = _commit_meta(args, f"ingest {Path(args.input_dir).name}")
    try:
        sid = ingest_directory(repo, args.input_dir, args.branch, message, author, ts, policy)
    except NotFoundError as exc:
        raise _InputError(str(exc)) from None
    report.snapshot_written = sid
    report.bytes_written = repo.objects.bytes_written
    print(sid)
    return EXIT_OK


def cmd_append(args, report: RunReport) -> int:
    repo = _repo(args)
    report.snapshot_read = repo.head(args.branch) if args.branch in repo.branches() else None
    message, author, ts = _commit_meta(args, f"append {len(args.files)} file(s)")
    for f in args.files:
        if not Path(f).is_file():
            raise _InputError(f"input file {f} does not exist")
    sid = append_paths(repo, args.files, args.branch, message, author, ts, max_attempts=args.max_attempts)
    report.snapshot_written = sid
    report.bytes_written = repo.objects.bytes_written
    print(sid)
    return EXIT_OK


def _tree_lines(snap, path: str) -> list:
    lines = []
    root = "" if path in ("", "/") else str(TreePath.parse(path))
    if root and not snap.has_group(root) and not snap.has_array(root):
        raise snap._not_found(root)

    def walk(p: str, depth: int):
        if snap.has_array(p):
            meta = snap.array_meta(p)
            dims = ", ".join(f"{d}={s}" for d, s in zip(meta.dims, meta.shape))
            lines.append(f"{'  ' * depth}{p}  [{meta.dtype}] ({dims}) chunks={list(meta.chunks)}")
            return
        if p:
            lines.append(f"{'  ' * depth}{p}/")
        for name in snap.children(p):
            walk(f"{p}/{name}" if p else name, depth + (1 if p else 0))

    walk(root, 0)
    return lines


def cmd_tree(args, report: RunReport) -> int:
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    report.snapshot_read = snap.id
    sys.stdout.write("\n".join(_tree_lines(snap, args.path)) + "\n")
    return EXIT_OK


def cmd_get(args, report: RunReport) -> int:
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    report.snapshot_read = snap.id
    path = str(TreePath.parse(args.path))
    if snap.has_group(path):
        doc = {"path": path, "kind": "group", "attrs": snap.group_attrs(path), "children": snap.children(path)}
        _emit(args, json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n")
        return EXIT_OK
    meta = snap.array_meta(path)
    region = []
    by_dim = {"time": args.time, "azimuth": args.azimuth, "range": args.range_}
    for dim in meta.dims:
        region.append(_index(by_dim.get(dim)))
    data, trace = snap.read_region(path, tuple(region))
    _note_trace(report, trace)
    if args.format == "bin":
        _emit(args, data=encode_container("array", {"path": path, "dims": list(meta.dims)}, {"data": data}))
    elif args.format == "json":
        values = data.astype(np.float64)
        doc = {"path": path, "dims": list(meta.dims), "shape": list(data.shape), "dtype": meta.dtype,
               "data": np.where(np.isfinite(values), values, None).tolist() if data.dtype.kind == "f" else data.tolist()}
        _emit(args, json.dumps(doc, sort_keys=True) + "\n")
    else:
        lines = [",".join(list(meta.dims) + ["value"])]
        lows = [r.start or 0 if isinstance(r, slice) else r for r in region]
        for idx in np.ndindex(*data.shape):
            v = data[idx]
            cell = repr(float(v)) if data.dtype.kind == "f" else str(int(v))
            lines.append(",".join([str(lo + i) for lo, i in zip(lows, idx)] + [cell]))
        _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def _target(args) -> GeoPoint:
    if args.lat is None or args.lon is None:
        raise _InputError("--lat and --lon are required")
    return GeoPoint(args.lat, args.lon)


def cmd_qvp(args, report: RunReport) -> int:
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    report.snapshot_read = snap.id
    product = qvp(snap, args.vcp, args.sweep, args.moment, _time_range(args), args.threshold)
    _note_trace(report, product.trace)
    _emit_product(args, product)
    return EXIT_OK


def cmd_qpe(args, report: RunReport) -> int:
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    report.snapshot_read = snap.id
    product = accumulate_qpe(snap, args.vcp, args.sweep, _time_range(args), ZrParams(args.zr_a, args.zr_b),
                             args.max_gap)
    _note_trace(report, product.trace)
    _emit_product(args, product)
    return EXIT_OK


def cmd_timeseries(args, report: RunReport) -> int:
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    report.snapshot_read = snap.id
    product = extract_timeseries(snap, args.vcp, args.sweep, args.moment, _target(args), _time_range(args))
    _note_trace(report, product.trace)
    _emit_product(args, product)
    return EXIT_OK


def cmd_log(args, report: RunReport) -> int:
    repo = _repo(args)
    entries = repo.log(args.branch)
    report.snapshot_read = entries[0].id if entries else None
    for s in entries:
        print(f"{s.id}  {s.timestamp}  {s.author or '-'}  {s.message}")
    return EXIT_OK


def cmd_rollback(args, report: RunReport) -> int:
    repo = _repo(args)
    report.snapshot_read = repo.head(args.branch)
    try:
        target = repo.resolve_ref(args.snapshot)
    except NotFoundError as exc:
        raise InvalidRollbackError(str(exc)) from None
    message, author, ts = _commit_meta(args, f"rollback to {target[:12]}")
    try:
        sid = repo.rollback(args.branch, target, message, author, ts)
    except UnknownSnapshotError as exc:
        raise InvalidRollbackError(str(exc)) from None
    report.snapshot_written = sid
    print(sid)
    return EXIT_OK


def _dir_bytes(path: Path, pattern: str = "*") -> int:
    return sum(p.stat().st_size for p in Path(path).rglob(pattern) if p.is_file())


def run_bench(args, report: Optional[RunReport] = None) -> BenchResult:
    """Time a task against the store and against the raw files; compare products bitwise."""
    if not args.raw_dir:
        raise _InputError("--raw-dir is required")
    repo = _repo(args)
    snap = repo.checkout_ref(_read_ref(args))
    if report is not None:
        report.snapshot_read = snap.id
    trange = _time_range(args)
    params = ZrParams(args.zr_a, args.zr_b)
    if args.task == "qvp":
        def store():
            return qvp(snap, args.vcp, args.sweep, args.moment, trange, args.threshold)

        def base():
            return baseline_qvp(args.raw_dir, args.vcp, args.sweep, args.moment, trange, args.threshold)
    elif args.task == "qpe":
        def store():
            return accumulate_qpe(snap, args.vcp, args.sweep, trange, params, args.max_gap)

        def base():
            return baseline_qpe(args.raw_dir, args.vcp, args.sweep, trange, params, args.max_gap)
    else:
        target = _target(args)

        def store():
            return extract_timeseries(snap, args.vcp, args.sweep, args.moment, target, trange)

        def base():
            return baseline_timeseries(args.raw_dir, args.vcp, args.sweep, args.moment, target, trange)

    def timed(fn):
        best, result = math.inf, None
        for _ in range(max(1, args.repeat)):
            t0 = time.perf_counter()
            result = fn()
            best = min(best, time.perf_counter() - t0)
        return best, result

    equality = BITWISE_EQUAL
    try:
        t_store, p_store = timed(store)
    except (ObjectNotFoundError, CorruptObjectError, CorruptFrameError, CodecError) as exc:
        t_store, p_store = math.nan, None
        equality = f"store-unreadable: {exc}"
    t_base, p_base = timed(base)
    if p_store is not None:
        if report is not None:
            _note_trace(report, p_store.trace)
        if encode_product(p_store) != encode_product(p_base):
            equality = "different"
    volumes = int(p_base.times.size) if hasattr(p_base, "times") else int(p_base.n_scans)
    valid = equality == BITWISE_EQUAL
    return BenchResult(
        task=args.task, baseline_seconds=t_base, store_seconds=t_store,
        speedup=(t_base / t_store) if valid and t_store > 0 else None,
        volumes=volumes, raw_bytes=_dir_bytes(Path(args.raw_dir), "*.rdt"),
        store_bytes=_dir_bytes(Path(args.repo) / "objects"), equality=equality,
    )


def cmd_bench(args, report: RunReport) -> int:
    result = run_bench(args, report)
    doc = asdict(result)
    report.details["bench"] = doc
    print(json.dumps(doc, sort_keys=True))
    if not result.valid:
        raise BenchInvalid(f"benchmark invalid: {result.equality}")
    return EXIT_OK


def _synth_mapping(args) -> dict:
    if args.vcp not in VCP_FIXTURES:
        raise _InputError(f"unknown VCP fixture {args.vcp!r}; choose from {sorted(VCP_FIXTURES)}")
    base = VCP_FIXTURES[args.vcp]
    elevations = base.elevations_deg
    if args.elevations:
        elevations = tuple(float(e) for e in str(args.elevations).split(","))
    n = len(elevations)
    vcp = VcpDefinition(
        name=base.name, elevations_deg=elevations,
        n_rays=base.n_rays[0] if len(set(base.n_rays)) == 1 else base.n_rays[:n],
        n_gates=args.n_gates if args.n_gates else (base.n_gates[0] if len(set(base.n_gates)) == 1 else base.n_gates[:n]),
        range_step_m=args.range_step or base.range_step_m,
        revisit_seconds=args.revisit or base.revisit_seconds,
        range_start_m=(args.range_step / 2.0) if args.range_step else base.range_start_m,
    )
    field_doc = {"kind": args.field}
    if args.field == "constant":
        field_doc["value"] = args.value
    elif args.field == "gaussian_storm":
        field_doc.update({"center_m": [30000.0, 20000.0], "sigma_m": 20000.0, "advection_ms": [10.0, 5.0]})
    return {
        "vcp": vcp, "n_volumes": args.volumes, "start_time": args.start_time, "seed": args.seed,
        "field": field_doc, "moments": [m.strip() for m in str(args.moments).split(",") if m.strip()],
        "azimuth_jitter_deg": args.jitter, "quantization_db": args.quantization_db,
    }


def cmd_synth(args, report: RunReport) -> int:
    config = synth_config_from_mapping(_synth_mapping(args))
    paths = write_synthetic(config, args.out_dir)
    report.details["files"] = len(paths)
    report.bytes_written = sum(p.stat().st_size for p in paths)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "append": cmd_append, "tree": cmd_tree, "get": cmd_get, "qvp": cmd_qvp,
    "qpe": cmd_qpe, "timeseries": cmd_timeseries, "log": cmd_log, "rollback": cmd_rollback,
    "bench": cmd_bench, "synth": cmd_synth,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, BenchInvalid):
        return EXIT_BENCH_INVALID
    if isinstance(exc, InvalidRollbackError):
        return EXIT_ROLLBACK
    if isinstance(exc, ConflictError):
        return EXIT_CONFLICT
    if isinstance(exc, PathNotFoundError):
        return EXIT_PATH
    if isinstance(exc, (RadarArchiveError, ValueError, OSError, yaml.YAMLError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


def main(argv=None) -> int:
    t0 = time.perf_counter()
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, int) else EXIT_INPUT
    except (ValueError, OSError, yaml.YAMLError) as exc:
        sys.stderr.write(json.dumps({"command": None, "error": str(exc), "exit_status": EXIT_INPUT}) + "\n")
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    params = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("command", "verbose")}
    report = RunReport(command=args.command, parameters=params)
    try:
        status = COMMANDS[args.command](args, report)
    except Exception as exc:  # every failure still yields a report and a fixed exit code
        status = exit_code_for(exc)
        report.error = f"{type(exc).__name__}: {exc}"
        if isinstance(exc, ConflictError) and exc.report is not None:
            report.details["conflicts"] = exc.report.to_json()
        if status == EXIT_INTERNAL:
            log.exception("internal error")
    report.exit_status = status
    report.wall_time_s = time.perf_counter() - t0
    if getattr(args, "report", "json") == "json":
        sys.stderr.write(report.to_json() + "\n")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
