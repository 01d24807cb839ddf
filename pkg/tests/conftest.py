import numpy as np
import pytest

from scd import AffineDrift, SimulationConfig, generate_er_dag, simulate

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number, name, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


@pytest.fixture(scope="session")
def small_problem():
    """Stable p=5 DAG trajectory shared by estimator tests."""
    graph = generate_er_dag(5, 3, seed=3)
    drift = AffineDrift(np.diag(np.linspace(-0.5, -0.1, 5)))
    x0 = np.random.default_rng(3).uniform(0.5, 1.5, 5)
    traj = simulate(drift, graph, SimulationConfig(x0=x0, seed=11))
    return graph, drift, traj
