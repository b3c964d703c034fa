import numpy as np
import pytest

from hacwap.numerics import random_orthogonal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, dim, floor=0.5):
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + floor * np.eye(dim)


def random_kron_sigma(rng, k, rho=None):
    rho = rng.uniform(-0.8, 0.8) if rho is None else rho
    omega = np.array([[1.0, rho], [rho, 1.0]]) * rng.uniform(0.5, 2.0)
    return np.kron(omega, random_spd(rng, k)), omega


@pytest.fixture
def spd(rng):
    return lambda dim: random_spd(rng, dim)


@pytest.fixture
def orthogonal(rng):
    return lambda k: random_orthogonal(k, rng)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
