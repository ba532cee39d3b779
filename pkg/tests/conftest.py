import importlib
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from caepl import kernels  # noqa: E402
from caepl.data import SyntheticSpec, generate_synthetic  # noqa: E402

GRAD_SEEDS = (0, 1, 2)


@pytest.fixture(params=["python", "cython"])
def backend(request, monkeypatch):
    """Swap the kernel module behind ``caepl.kernels`` for the duration of a test."""
    name = "caepl._kernels_py" if request.param == "python" else "caepl._ckernels"
    try:
        mod = importlib.import_module(name)
    except ImportError:
        pytest.skip("compiled kernels are not built")
    for fn in ("im2col", "col2im", "maxpool2x2_forward", "maxpool2x2_backward"):
        monkeypatch.setattr(kernels, fn, getattr(mod, fn))
    return request.param


@pytest.fixture(params=GRAD_SEEDS)
def seed(request):
    return request.param


@pytest.fixture
def rng(seed):
    return np.random.default_rng(seed)


@pytest.fixture(scope="session")
def tiny_synthetic():
    spec = SyntheticSpec(size=32, n_train=12, n_val=6, seed=3)
    return generate_synthetic(spec)


# acceptance verdict lines, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdicts():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
