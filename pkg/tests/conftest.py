import numpy as np
import pytest

from augswee.population import FinitePopulation, SurveySample, generate_population

_ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion (echoed in the summary)."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


@pytest.fixture(scope="session")
def sim_population():
    """The N = 20000 synthetic population used across tests."""
    return generate_population(20000, seed=11)


@pytest.fixture(scope="session")
def big_population():
    return generate_population(200000, seed=5)


@pytest.fixture
def toy_population():
    rng = np.random.default_rng(3)
    return FinitePopulation(z=rng.gamma(2.0, 2.0, 12), x=rng.uniform(1, 4, 12))


@pytest.fixture
def srs_sample():
    """Small SRS-like sample with equal probabilities."""
    z = np.array([3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0])
    return SurveySample(z=z, pi=np.full(8, 0.1), N=80, design="SRSWOR")
