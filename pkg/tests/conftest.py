import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nmfre import DataSet, FitConfig, fit, load_orthodont

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance lines are echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def orthodont():
    return load_orthodont()


@pytest.fixture(scope="session")
def orthodont_fit(orthodont):
    return fit(orthodont, FitConfig(Q=1, cap_ratio=0.21))


def random_problem(seed, P=6, N=20, Q=2, K=2, noise=0.1):
    """Small positive data set with a known generating (X, Theta, U)."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.1, 1.0, (P, Q))
    X /= X.sum(axis=0)
    Theta = rng.uniform(1.0, 5.0, (Q, K))
    A = np.vstack([np.ones(N), rng.uniform(0.0, 2.0, (K - 1, N))])
    U = 0.3 * rng.standard_normal((Q, N))
    Y = np.abs(X @ (Theta @ A + U) + noise * rng.standard_normal((P, N)))
    return DataSet(Y, A), X, Theta, U


def quiet_fit(data, cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit(data, cfg)
