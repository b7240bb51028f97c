import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hfo2ps import instances as inst

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def small_model():
    return inst.make_basis_mixture(4, 2, 4, 3, 2.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_policy(rng, H, S, A):
    from hfo2ps.mdp import StochasticPolicy

    return StochasticPolicy(rng.dirichlet(np.ones(A), size=(H, S)))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
