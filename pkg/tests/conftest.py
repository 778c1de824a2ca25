import numpy as np
import pytest

from dfmems.core import MembranePair, make_grid


def random_even_state(grid, rng, amp=0.3):
    a, c = rng.uniform(0.05, amp, size=2)
    bump = 1 - grid.x**2
    return MembranePair(grid, -a * bump * (1 + 0.2 * bump), -1 + c * bump)


def random_state(grid, rng, amp=0.3):
    """Smooth admissible state with broken symmetry (cubic tilt)."""
    a, c = rng.uniform(0.05, amp, size=2)
    b, d = rng.uniform(-0.5, 0.5, size=2)
    bump = 1 - grid.x**2
    return MembranePair(grid, -a * bump * (1 + b * grid.x), -1 + c * bump * (1 + d * grid.x))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_grid():
    return make_grid(33, 17)


# acceptance criteria register (number, title, passed, detail) here
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
