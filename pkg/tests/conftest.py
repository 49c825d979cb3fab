import numpy as np
import pytest

from marpo.approximator import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    """Tiny networks (obs 5, state 4, 3 actions) with non-trivial weights."""
    p = init_params(5, 4, 3, hidden=(8, 8), seed=0)
    return p.with_flat(np.random.default_rng(0).normal(0.0, 0.5, p.size))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
