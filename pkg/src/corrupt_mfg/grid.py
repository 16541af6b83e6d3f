"""Uniform tensor grids on the unit interval/square and the time axis.

Values are stored as numpy arrays indexed ``[j, i]`` for ``(y_j, x_i)`` in two
dimensions and ``[n, j, i]`` for space-time fields, so a C-order flatten runs
over ``(t, y, x)`` with ``x`` fastest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on ``[0, 1]`` (dim 1) or ``[0, 1]^2`` (dim 2)."""

    nx: int
    ny: int | None = None

    def __post_init__(self) -> None:
        if self.nx < 3:
            raise ValueError(f"nx must be >= 3, got {self.nx}")
        if self.ny is not None and self.ny < 3:
            raise ValueError(f"ny must be >= 3, got {self.ny}")

    @classmethod
    def square(cls, n: int) -> Grid:
        return cls(n, n)

    @property
    def dim(self) -> int:
        return 1 if self.ny is None else 2

    @property
    def hx(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def hy(self) -> float:
        if self.ny is None:
            raise AttributeError("1-D grid has no y spacing")
        return 1.0 / (self.ny - 1)

    @property
    def x(self) -> NDArray:
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def y(self) -> NDArray:
        if self.ny is None:
            raise AttributeError("1-D grid has no y axis")
        return np.linspace(0.0, 1.0, self.ny)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) if self.ny is None else (self.ny, self.nx)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacings(self) -> tuple[float, ...]:
        """Spacings in array-axis order (``(hy, hx)`` in 2-D)."""
        return (self.hx,) if self.ny is None else (self.hy, self.hx)

    def mesh(self) -> tuple[NDArray, NDArray]:
        """Coordinate arrays ``(X, Y)`` of shape ``(ny, nx)``."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    def weights(self) -> NDArray:
        """Trapezoid weights so that ``sum(w * f)`` approximates the integral."""
        wx = trapezoid_weights(self.nx)
        if self.ny is None:
            return wx
        return np.outer(trapezoid_weights(self.ny), wx)

    def refined(self) -> Grid:
        """Grid with halved spacings (nodes nested in the new grid)."""
        return Grid(2 * self.nx - 1, None if self.ny is None else 2 * self.ny - 1)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"T must be > 0, got {self.T}")
        if self.nt < 2:
            raise ValueError(f"nt must be >= 2, got {self.nt}")

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    @property
    def t(self) -> NDArray:
        return np.linspace(0.0, self.T, self.nt)

    def weights(self) -> NDArray:
        return trapezoid_weights(self.nt) * self.T

    def refined(self) -> TimeGrid:
        return TimeGrid(self.T, 2 * self.nt - 1)


@dataclass(frozen=True)
class BoundaryPartition:
    """Absorbing face ``{x = 1}`` and the reflecting rest of the boundary."""

    grid: Grid

    @property
    def gamma0(self) -> NDArray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        mask[..., -1] = True
        return mask

    @property
    def gamma1(self) -> NDArray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        mask[..., 0] = True
        if self.grid.dim == 2:
            mask[0, :] = True
            mask[-1, :] = True
        return mask & ~self.gamma0


@dataclass
class ScalarField:
    grid: Grid
    values: NDArray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> ScalarField:
        if grid.dim == 1:
            return cls(grid, np.broadcast_to(fn(grid.x), grid.shape).copy())
        X, Y = grid.mesh()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape).copy())

    def __sub__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values - other.values)

    def __add__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values + other.values)

    def __mul__(self, c: float) -> ScalarField:
        return ScalarField(self.grid, c * self.values)

    __rmul__ = __mul__


@dataclass
class SpaceTimeField:
    grid: Grid
    time: TimeGrid
    values: NDArray = field(repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.time.nt, *self.grid.shape)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def at(self, n: int) -> ScalarField:
        return ScalarField(self.grid, self.values[n])

    @classmethod
    def from_function(cls, grid: Grid, time: TimeGrid, fn) -> SpaceTimeField:
        t = time.t
        if grid.dim == 1:
            vals = fn(grid.x[None, :], t[:, None])
        else:
            X, Y = grid.mesh()
            vals = fn(X[None], Y[None], t[:, None, None])
        return cls(grid, time, np.broadcast_to(vals, (time.nt, *grid.shape)).copy())


def trapezoid_weights(n: int) -> NDArray:
    w = np.full(n, 1.0 / (n - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _check_finite(values: NDArray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("integrand contains non-finite values")


def integrate_space(f: ScalarField) -> float:
    """Trapezoid rule over the unit interval or square."""
    _check_finite(f.values)
    return float(np.sum(f.grid.weights() * f.values))


def integrate_spacetime(f: SpaceTimeField) -> float:
    _check_finite(f.values)
    space = np.tensordot(f.values, f.grid.weights(), axes=f.grid.dim)
    return float(np.dot(f.time.weights(), space))


def gradient_array(values: NDArray, grid: Grid) -> tuple[NDArray, ...]:
    """Second-order gradient of nodal values; returns ``(f_x,)`` or ``(f_x, f_y)``.

    Trailing axes of ``values`` must match the grid; leading axes (e.g. time)
    are carried along.
    """
    nd = values.ndim
    if grid.dim == 1:
        return (np.gradient(values, grid.hx, axis=nd - 1, edge_order=2),)
    fx = np.gradient(values, grid.hx, axis=nd - 1, edge_order=2)
    fy = np.gradient(values, grid.hy, axis=nd - 2, edge_order=2)
    return fx, fy


def gradient(f: ScalarField) -> tuple[ScalarField, ...]:
    return tuple(ScalarField(f.grid, g) for g in gradient_array(f.values, f.grid))


def h1_norm(f: ScalarField) -> float:
    grads = gradient_array(f.values, f.grid)
    w = f.grid.weights()
    total = np.sum(w * f.values**2) + sum(np.sum(w * g**2) for g in grads)
    return float(np.sqrt(total))


def write_field_csv(path: str | Path, f: ScalarField | SpaceTimeField) -> None:
    """Write a field as CSV rows, row-major over ``(t, y, x)``."""
    path = Path(path)
    grid = f.grid
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(f, SpaceTimeField):
            if grid.dim == 1:
                w.writerow(["t", "x", "value"])
                for n, t in enumerate(f.time.t):
                    for i, x in enumerate(grid.x):
                        w.writerow([_fmt(t), _fmt(x), _fmt(f.values[n, i])])
            else:
                w.writerow(["t", "x", "y", "value"])
                for n, t in enumerate(f.time.t):
                    for j, y in enumerate(grid.y):
                        for i, x in enumerate(grid.x):
                            w.writerow([_fmt(t), _fmt(x), _fmt(y), _fmt(f.values[n, j, i])])
        else:
            if grid.dim == 1:
                w.writerow(["x", "value"])
                for i, x in enumerate(grid.x):
                    w.writerow([_fmt(x), _fmt(f.values[i])])
            else:
                w.writerow(["x", "y", "value"])
                for j, y in enumerate(grid.y):
                    for i, x in enumerate(grid.x):
                        w.writerow([_fmt(x), _fmt(y), _fmt(f.values[j, i])])


def read_field_csv(path: str | Path) -> ScalarField | SpaceTimeField:
    """Inverse of :func:`write_field_csv` (grid sizes inferred from the rows)."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    cols = {name: rows[:, k] for k, name in enumerate(header)}
    nx = len(np.unique(cols["x"]))
    ny = len(np.unique(cols["y"])) if "y" in cols else None
    grid = Grid(nx, ny)
    if "t" in cols:
        ts = np.unique(cols["t"])
        time = TimeGrid(float(ts[-1]), len(ts))
        return SpaceTimeField(grid, time, cols["value"].reshape(time.nt, *grid.shape))
    return ScalarField(grid, cols["value"].reshape(grid.shape))


def _fmt(v: float) -> str:
    return repr(float(v))
