import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radarchive.ingest import (
    ConstantField,
    GaussianStorm,
    NoiseField,
    SynthConfig,
    VcpDefinition,
    generate_synthetic,
    write_synthetic,
)
from radarchive.model import MomentKind, RadarSite, Sweep, SweepGeometry, VolumeScan
from radarchive.txn import Repository

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")

ACCEPTANCE = {}


@contextmanager
def criterion(number, title):
    """Record one pass/fail line for an acceptance criterion; the yielded dict collects details."""
    t0 = time.perf_counter()
    details = {}
    try:
        yield details
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        ACCEPTANCE[number] = f"FAIL  {title} [{time.perf_counter() - t0:.1f} s] {type(exc).__name__}: {msg[:200]}"
        raise
    extra = ", ".join(f"{k}={v}" for k, v in details.items())
    ACCEPTANCE[number] = f"PASS  {title} [{time.perf_counter() - t0:.1f} s] {extra}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {number:2d}: {ACCEPTANCE[number]}")


SITE = RadarSite(36.74, -98.13, 383.0, "KSYN")
START = "2011-05-20T00:00:00Z"


def small_vcp(name="VCP-212", elevations=(0.5, 1.5), n_rays=360, n_gates=40, step=1000.0, revisit=300.0):
    return VcpDefinition(name, elevations, n_rays, n_gates, step, revisit, step / 2)


def synth(n=4, vcp=None, field=ConstantField(30.0), seed=0, moments=("DBZH",), start=START, **kw):
    config = SynthConfig(vcp or small_vcp(), n, start, seed, field, SITE, moments, **kw)
    return generate_synthetic(config)


def synth_files(directory, n=4, vcp=None, field=ConstantField(30.0), seed=0, moments=("DBZH",),
                start=START, **kw):
    config = SynthConfig(vcp or small_vcp(), n, start, seed, field, SITE, moments, **kw)
    return write_synthetic(config, directory)


def make_sweep(azimuths, values, elevation=0.5, start=125.0, step=250.0, t0=0, moment="DBZH"):
    values = np.asarray(values, dtype=np.float32)
    geo = SweepGeometry(elevation, azimuths, start, step, values.shape[1],
                        np.full(len(azimuths), t0, dtype=np.int64))
    return Sweep(geo, {MomentKind.parse(moment): values})


def make_volume(sweeps, t, vcp="VCP-212", site=SITE):
    return VolumeScan(vcp, t, site, sweeps)


@pytest.fixture
def repo(tmp_path):
    return Repository.init(tmp_path / "repo", fsync=False)


@pytest.fixture
def storm():
    return GaussianStorm((15000.0, 5000.0), 8000.0, 50.0, (5.0, 2.0))


@pytest.fixture
def noise():
    return NoiseField(25.0, 8.0)
