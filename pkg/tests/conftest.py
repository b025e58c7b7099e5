import numpy as np
import pytest

from flowagent.fields import FlowState, GridSpec, ScalarField


@pytest.fixture
def grid64():
    return GridSpec(64, 64)


@pytest.fixture
def grid32():
    return GridSpec(32, 32)


def smooth_field(grid, rng, kmax=6):
    """Random band-limited real field built from a handful of Fourier modes."""
    X, Y = grid.coords()
    out = np.zeros(grid.shape)
    for _ in range(8):
        kx, ky = rng.integers(-kmax, kmax + 1, 2)
        out += rng.normal() * np.cos(kx * X + ky * Y + rng.uniform(0, 2 * np.pi))
    return out


def vort_state(grid, values):
    return FlowState.from_vorticity(ScalarField(grid, values, "vorticity", "1"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s[6:10]):
            terminalreporter.write_line(line)
