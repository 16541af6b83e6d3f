from __future__ import annotations

import numpy as np
import pytest

from corrupt_mfg.grid import Grid, ScalarField, TimeGrid
from corrupt_mfg.model import ModelParams


@pytest.fixture
def grid33() -> Grid:
    return Grid.square(33)


@pytest.fixture
def params() -> ModelParams:
    return ModelParams()


def bump(grid: Grid, x0: float, y0: float, width: float = 0.08) -> ScalarField:
    """Gaussian bump, zero on the absorbing face, unit trapezoid mass."""
    X, Y = grid.mesh()
    v = np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / (2 * width**2))
    v[:, -1] = 0.0
    v /= np.sum(grid.weights() * v)
    return ScalarField(grid, v)


def psi_field(grid: Grid, params: ModelParams) -> ScalarField:
    X, Y = grid.mesh()
    return ScalarField(grid, np.broadcast_to(params.psi(X, Y), grid.shape).copy())


def time_grid(params: ModelParams, nt: int = 64) -> TimeGrid:
    return TimeGrid(params.T, nt)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
