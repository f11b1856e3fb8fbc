import numpy as np
import pytest

from fedspace.gmm import GaussianMixtureModel, GmmTheta, generate_synthetic

ACCEPTANCE_LINES = []


def record(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def truth():
    return GmmTheta(
        weights=np.array([0.5, 0.5]),
        means=np.array([[-2.0, 0.0], [2.0, 0.5]]),
        cov=np.array([[1.0, 0.2], [0.2, 0.8]]),
    )


@pytest.fixture
def small_gmm(truth):
    """Two components in the plane, N = 200 points over 4 workers."""
    data = generate_synthetic(truth, 200, 4, "iid", seed=3)
    return GaussianMixtureModel(data.data, 2)


@pytest.fixture
def small_s0(small_gmm):
    return small_gmm.initial_statistic(np.random.default_rng(0))
