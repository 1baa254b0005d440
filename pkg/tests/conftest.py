import numpy as np
import pytest

from rlmm.env import enumerate_reachable, get_board
from rlmm.tabular import PopulationPrior, sample_population, simulate_trajectories

ACCEPTANCE_LINES: list[str] = []


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def line5():
    return get_board("line-5")


@pytest.fixture(scope="session")
def tiny():
    return get_board("tiny-cross")


@pytest.fixture(scope="session")
def line5_task(line5):
    return enumerate_reachable(line5)


@pytest.fixture(scope="session")
def tiny_task(tiny):
    return enumerate_reachable(tiny)


@pytest.fixture(scope="session")
def tiny_data(tiny_task):
    betas = sample_population(PopulationPrior(), 12, seed=5)
    return simulate_trajectories(tiny_task, betas, 8, seed=6)


@pytest.fixture
def record_acceptance():
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
