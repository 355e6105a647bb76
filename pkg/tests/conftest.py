import numpy as np
import pytest

from smiso.data import Dataset, FeatureVector, Sample, synth_gaussian
from smiso.model import Loss, ProblemSpec


class LinearLoss(Loss):
    """phi(y, z) = 1/2 - y z.

    With scalar feature 1, label a in {-1, +1} and mu = 1 the per-example
    function is ``1/2 - a x + x^2/2 = (x - a)^2 / 2``, the toy quadratic
    used for hand traces.
    """

    name = "linear"
    smoothness = 0.0

    def value(self, y, z):
        return 0.5 - np.multiply(y, z)

    def deriv(self, y, z):
        return -np.asarray(y, dtype=np.float64) * np.ones_like(np.asarray(z, dtype=np.float64))

    def deriv_scalar(self, y, z):
        return -float(y)


class FixedSteps:
    """Schedule stand-in: ``step_at(t) = fn(t)``."""

    def __init__(self, fn):
        self.fn = fn

    def step_at(self, t):
        return self.fn(t)


def toy_quadratic(a):
    """Dataset with scalar feature 1 and labels ``a`` (each +-1)."""
    samples = [Sample(FeatureVector.dense([1.0]), float(ai)) for ai in a]
    return Dataset(tuple(samples), 1), ProblemSpec(LinearLoss(), 1.0)


@pytest.fixture
def toy():
    return toy_quadratic


@pytest.fixture(scope="session")
def small_dense():
    return synth_gaussian(30, 8, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a criterion outcome, then fail the test if it did not pass."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, ok, detail):
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
