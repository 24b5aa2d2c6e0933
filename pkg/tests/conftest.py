import numpy as np
import pytest

from stacklqg.augment import augment
from stacklqg.integrators import TimeGrid
from stacklqg.problem import FIXTURES, fixture_debt, fixture_det, fixture_scalar
from stacklqg.riccati import solve_riccati
from stacklqg.strategies import build_gains


class Solved:
    """A spec with its augmented system, grid, Riccati bundle and gains."""

    def __init__(self, spec, N):
        self.spec = spec
        self.aug = augment(spec)
        self.grid = TimeGrid(spec.T, N)
        self.bundle = solve_riccati(self.aug, self.grid)
        self.gains = build_gains(self.bundle, self.aug)


_cache = {}


def solved(name, N, **changes):
    key = (name, N, tuple(sorted((k, repr(v)) for k, v in changes.items())))
    if key not in _cache:
        _cache[key] = Solved(FIXTURES[name](**changes), N)
    return _cache[key]


@pytest.fixture
def scalar_spec():
    return fixture_scalar()


@pytest.fixture
def debt_spec():
    return fixture_debt()


@pytest.fixture
def det_spec():
    return fixture_det()


@pytest.fixture
def scalar_2000():
    return solved("scalar", 2000)


@pytest.fixture
def debt_2000():
    return solved("debt", 2000)


@pytest.fixture
def scalar_400():
    return solved("scalar", 400)


@pytest.fixture
def debt_400():
    return solved("debt", 400)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int(str(k).rstrip("abds")), str(k))):
        terminalreporter.write_line(RESULTS[key])
