import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treelearn.data import make_logistic
from treelearn.model import LossKind, Objective

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_logistic():
    ds, w = make_logistic(2000, 64, nnz=6, seed=11)
    return ds, Objective(LossKind.LOGISTIC, 1e-3, 64)


@pytest.fixture(scope="session")
def synthetic():
    """The shared desk-scale problem: n=1e5, d=2^12, lam=1e-4."""
    ds, _ = make_logistic(100_000, 4096, nnz=10, seed=3)
    return ds, Objective(LossKind.LOGISTIC, 1e-4, 4096)


def round_robin(ds, m, k):
    return ds.subset(np.arange(k, ds.n, m))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
