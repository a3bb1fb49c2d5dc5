import numpy as np
import pytest


def ideal_stack(Phi, A=0.5, B=0.5):
    """Independent forward model: I_n = A + B*cos(Phi - 2*pi*n/3)."""
    Phi = np.asarray(Phi, dtype=np.float64)
    return tuple(A + B * np.cos(Phi - 2 * np.pi * n / 3) for n in range(3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
