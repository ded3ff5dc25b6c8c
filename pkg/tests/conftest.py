import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from phytosense import cli  # noqa: E402
from phytosense.rng import substream  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return substream(0, "test")


def run_cli(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Full default pipeline twice: serial and with two extraction workers."""
    import time

    out = {}
    for jobs in (1, 2):
        wd = tmp_path_factory.mktemp(f"pipeline_jobs{jobs}")
        t0 = time.perf_counter()
        code = run_cli("pipeline", "--workdir", wd, "--jobs", jobs)
        out[jobs] = {"workdir": wd, "code": code, "seconds": time.perf_counter() - t0}
    return out


@pytest.fixture(scope="session")
def small_workdir(tmp_path_factory):
    """A short corpus run through the pipeline, for CLI contract tests."""
    wd = tmp_path_factory.mktemp("small")
    code = run_cli("pipeline", "--workdir", wd, "--days", 8, "--plants-per-group", 2,
                   "--horizon", "30min", "--held-out", "P03", "P04", "P07")
    assert code == 0
    return wd


def as_float_array(x):
    return np.asarray(x, dtype=np.float64)
