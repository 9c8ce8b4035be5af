import os
import sys

# single-threaded math everywhere; results must not depend on pool sizes
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, os.path.dirname(__file__))  # for the shared oracle helpers

import numpy as np
import pytest

import bevrefine.nd as nd


@pytest.fixture
def f64():
    """Run the test body under 64-bit default dtype."""
    with nd.dtype_scope(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0xBE5)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines past output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", []) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
