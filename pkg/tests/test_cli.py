import json
import os
import subprocess
import sys

import numpy as np
import pytest

from radarchive.analysis import decode_product
from radarchive.cli import EXIT_BENCH_INVALID, EXIT_CONFLICT, EXIT_INPUT, EXIT_OK, EXIT_PATH, EXIT_ROLLBACK, main
from radarchive.ingest import NoiseField, scan_archive_dir
from radarchive.txn import Repository

from conftest import small_vcp, synth_files

TS = ["--timestamp", "2024-01-01T00:00:00Z"]


def run(capsys, *argv):
    """Run the CLI in-process; returns (exit code, stdout, run report)."""
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [l for l in err.splitlines() if l.startswith("{")]
    return code, out, json.loads(lines[-1]) if lines else None


@pytest.fixture
def archive(tmp_path):
    """Ten scans in ``raw``, two later scans in ``extra``, and an ingested repository."""
    vcp = small_vcp(n_gates=10)
    paths = synth_files(tmp_path / "all", n=12, vcp=vcp, field=NoiseField(25.0, 8.0))
    raw, extra = tmp_path / "raw", tmp_path / "extra"
    raw.mkdir()
    extra.mkdir()
    for i, p in enumerate(paths):
        p.rename((raw if i < 10 else extra) / p.name)
    return tmp_path, raw, sorted(extra.iterdir())


@pytest.fixture
def ingested(archive, capsys):
    root, raw, extra = archive
    repo = root / "repo"
    code, _, report = run(capsys, "ingest", raw, "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_OK
    return repo, raw, extra, report


def test_ingest(ingested):
    repo, _, _, report = ingested
    assert report["command"] == "ingest" and report["exit_status"] == 0
    assert report["snapshot_written"] and report["bytes_written"] > 0
    assert len(Repository.open(repo, fsync=False).log("main")) == 2


def test_ingest_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, report = run(capsys, "ingest", tmp_path / "empty", "--repo", tmp_path / "r", *TS)
    assert code == EXIT_INPUT and report["error"]


def test_reingest_same_manifest(ingested, capsys):
    repo, raw, _, _ = ingested
    code, _, _ = run(capsys, "ingest", raw, "--repo", repo, "--branch", "again", "--no-fsync", *TS)
    assert code == EXIT_OK
    r = Repository.open(repo, fsync=False)
    a, b = (r.manifest(r.snapshot(r.head(x))) for x in ("main", "again"))
    assert a.hash == b.hash


def test_missing_repo(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("RDT_REPO", raising=False)
    code, _, _ = run(capsys, "log")
    assert code == EXIT_INPUT


def test_append(ingested, capsys):
    repo, _, extra, _ = ingested
    code, _, report = run(capsys, "append", extra[0], "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_OK
    code, out, _ = run(capsys, "get", "VCP-212/time", "--repo", repo, "--format", "json")
    assert len(json.loads(out)["data"]) == 11


def test_append_duplicate(ingested, capsys):
    repo, raw, _, _ = ingested
    code, _, report = run(capsys, "append", sorted(raw.iterdir())[3], "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_CONFLICT
    assert report["details"]["conflicts"][0]["kind"] == "time-range-overlap"


def test_concurrent_append_processes(ingested):
    repo, _, extra, _ = ingested
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    procs = [
        subprocess.Popen([sys.executable, "-m", "radarchive", "append", str(p), "--repo", str(repo), "--no-fsync",
                          "--report", "quiet"], env=env)
        for p in extra
    ]
    assert [p.wait(timeout=300) for p in procs] == [0, 0]
    r = Repository.open(repo, fsync=False)
    assert len(r.log("main")) == 4
    times = r.checkout_ref("main").read("VCP-212/time")
    assert times.size == 12 and np.all(np.diff(times) > 0)


def test_tree(ingested, capsys):
    repo = ingested[0]
    code, out, _ = run(capsys, "tree", "--repo", repo)
    assert code == EXIT_OK
    assert "VCP-212" in out and "sweep_1" in out and "DBZH" in out
    code, out, _ = run(capsys, "tree", "VCP-212/sweep_0", "--repo", repo)
    assert "sweep_1" not in out


def test_get_one_time_fetches_one_chunk(ingested, capsys):
    repo = ingested[0]
    code, out, report = run(capsys, "get", "VCP-212/sweep_0/DBZH", "--time", "0", "--repo", repo)
    assert code == EXIT_OK
    assert report["chunks_fetched"] == 1
    lines = out.splitlines()
    assert lines[0] == "time,azimuth,range,value" and len(lines) == 1 + 360 * 10
    assert lines[1] == "0,0,0," + lines[1].rsplit(",", 1)[1]


def test_get_group(ingested, capsys):
    code, out, _ = run(capsys, "get", "VCP-212", "--repo", ingested[0])
    doc = json.loads(out)
    assert doc["kind"] == "group" and "sweep_0" in doc["children"]


@pytest.mark.parametrize("path", ["VCP-212/sweep_9", "VCP-999", "VCP-212/sweep_0/KDP"])
def test_get_bad_path(ingested, capsys, path):
    code, _, report = run(capsys, "get", path, "--repo", ingested[0])
    assert code == EXIT_PATH and report["exit_status"] == EXIT_PATH


def test_qvp_csv(ingested, capsys):
    code, out, report = run(capsys, "qvp", "--repo", ingested[0], "--sweep", "1")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith("time_ns,range_m") and len(lines) == 1 + 10 * 10
    assert report["snapshot_read"] and report["chunks_fetched"] >= 1


def test_qpe_bin(ingested, capsys, tmp_path):
    out = tmp_path / "qpe.bin"
    code, _, _ = run(capsys, "qpe", "--repo", ingested[0], "--format", "bin", "--out", out)
    assert code == EXIT_OK
    kind, attrs, arrays = decode_product(out.read_bytes())
    assert kind == "qpe" and attrs["n_scans"] == 10 and arrays["totals"].shape == (360, 10)


def test_timeseries_json(ingested, capsys):
    code, out, _ = run(capsys, "timeseries", "--repo", ingested[0], "--lat", "36.8", "--lon", "-98.1",
                       "--format", "json", "--time-start", "2011-05-20T00:10:00Z")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["product"] == "timeseries" and len(doc["arrays"]["time"]) == 8


def test_timeseries_needs_target(ingested, capsys):
    code, _, _ = run(capsys, "timeseries", "--repo", ingested[0])
    assert code == EXIT_INPUT


def test_log_and_rollback(ingested, capsys, tmp_path):
    repo, _, extra, _ = ingested
    first = Repository.open(repo, fsync=False).head("main")
    run(capsys, "qvp", "--repo", repo, "--format", "bin", "--out", tmp_path / "before.bin")
    for p in extra:
        assert run(capsys, "append", p, "--repo", repo, "--no-fsync", *TS)[0] == EXIT_OK
    code, out, _ = run(capsys, "log", "--repo", repo)
    assert len(out.splitlines()) == 4 and out.splitlines()[-1].startswith(Repository.open(repo).root_id())
    code, out, _ = run(capsys, "rollback", first, "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_OK
    run(capsys, "qvp", "--repo", repo, "--format", "bin", "--out", tmp_path / "after.bin")
    assert (tmp_path / "before.bin").read_bytes() == (tmp_path / "after.bin").read_bytes()


def test_rollback_rejects_non_ancestor(ingested, capsys, tmp_path):
    repo, _, extra, _ = ingested
    other = tmp_path / "other"
    other.mkdir()
    (other / extra[0].name).write_bytes(extra[0].read_bytes())
    run(capsys, "ingest", other, "--repo", repo, "--branch", "dev", "--no-fsync", *TS)
    dev = Repository.open(repo, fsync=False).head("dev")
    code, _, _ = run(capsys, "rollback", dev, "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_ROLLBACK
    code, _, _ = run(capsys, "rollback", "f" * 64, "--repo", repo, "--no-fsync", *TS)
    assert code == EXIT_ROLLBACK


def test_bench_valid(ingested, capsys):
    repo, raw, _, _ = ingested
    code, out, report = run(capsys, "bench", "qvp", "--repo", repo, "--raw-dir", raw)
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["equality"] == "bitwise-equal" and doc["speedup"] > 0 and doc["volumes"] == 10
    assert report["details"]["bench"]["task"] == "qvp"


def test_bench_invalid_when_chunk_missing(ingested, capsys):
    repo, raw, _, _ = ingested
    r = Repository.open(repo, fsync=False)
    chunks = r.manifest(r.snapshot(r.head("main"))).chunks["VCP-212/sweep_0/DBZH"]
    r.objects.path_of(next(iter(chunks.values())).object_id).unlink()
    code, out, report = run(capsys, "bench", "qpe", "--repo", repo, "--raw-dir", raw)
    assert code == EXIT_BENCH_INVALID
    doc = json.loads(out)
    assert doc["speedup"] is None and doc["equality"].startswith("store-unreadable")


def test_config_file_and_env(ingested, capsys, tmp_path, monkeypatch):
    repo = ingested[0]
    cfg = tmp_path / "q.yaml"
    cfg.write_text("sweep: 1\nformat: json\nthreshold: 0.9\n")
    monkeypatch.setenv("RDT_REPO", str(repo))
    code, out, report = run(capsys, "qvp", "--config", cfg)
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["attrs"]["sweep_index"] == 1 and doc["attrs"]["threshold"] == 0.9
    # flags win over the file
    code, out, _ = run(capsys, "qvp", "--config", cfg, "--sweep", "0")
    assert json.loads(out)["attrs"]["sweep_index"] == 0


def test_config_unknown_key(ingested, capsys, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("nonsense: 1\n")
    code, _, _ = run(capsys, "qvp", "--config", cfg, "--repo", ingested[0])
    assert code == EXIT_INPUT


def test_report_fields(ingested, capsys):
    _, _, report = run(capsys, "qvp", "--repo", ingested[0])
    for key in ("command", "parameters", "snapshot_read", "snapshot_written", "wall_time_s", "chunks_fetched",
                "bytes_read", "bytes_written", "exit_status"):
        assert key in report
    assert report["parameters"]["sweep"] == 0


def test_quiet_report(ingested, capsys):
    code = main(["log", "--repo", str(ingested[0]), "--report", "quiet"])
    assert code == EXIT_OK and capsys.readouterr().err == ""


def test_synth(tmp_path, capsys):
    code, out, report = run(capsys, "synth", tmp_path / "s", "--volumes", "3", "--elevations", "0.5,1.5",
                            "--n-gates", "5", "--field", "gaussian_storm", "--moments", "DBZH,ZDR")
    assert code == EXIT_OK and report["details"]["files"] == 3
    assert len(scan_archive_dir(tmp_path / "s")) == 3


def test_synth_unknown_vcp(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", tmp_path / "s", "--vcp", "VCP-000")
    assert code == EXIT_INPUT
