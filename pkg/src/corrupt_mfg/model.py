"""Coefficients, costs, mean-field averages and feedback controls of the model.

States are ``(x, y)`` in the unit square: ``x`` is the degree of corruption and
``y`` the position in the hierarchy.  Closed-form inputs (income, terminal
payoff, variable volatilities) are given as numpy expressions in ``x, y, t``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .grid import Grid, ScalarField, gradient_array, trapezoid_weights

VARIANTS = ("plus", "minus")

DEFAULT_INCOME = "0.1*(1 + y)*(1 + 0.1*t) + 0.2*x*(1 + y)"
DEFAULT_PSI = "0.5*x**2 + 0.1*cos(pi*y)"

_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "cosh", "sinh",
        "abs", "minimum", "maximum", "where", "pi", "e",
    )
}


class Expression:
    """A closed-form numpy expression in ``x``, ``y`` and ``t``."""

    def __init__(self, source: str | float):
        self.source = str(source)
        try:
            self._code = compile(self.source, "<expression>", "eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        for name in self._code.co_names:
            if name not in _EXPR_NAMESPACE and name not in ("x", "y", "t"):
                raise ValueError(f"expression {self.source!r} uses unknown name {name!r}")
        self.constant_value: float | None = None
        if self.is_constant():
            self.constant_value = float(self())

    def __call__(self, x=0.0, y=0.0, t=0.0) -> NDArray:
        scope = {"x": np.asarray(x, float), "y": np.asarray(y, float), "t": np.asarray(t, float)}
        out = eval(self._code, {"__builtins__": {}, **_EXPR_NAMESPACE}, scope)
        shape = np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(t))
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def is_constant(self) -> bool:
        return not any(v in self._code.co_names for v in ("x", "y", "t"))

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Expression) and other.source == self.source

    def __hash__(self) -> int:
        return hash(self.source)


def _as_expression(v: Any) -> Expression:
    return v if isinstance(v, Expression) else Expression(v)


@dataclass(frozen=True)
class ModelParams:
    """All model coefficients.

    ``g_a1``/``g_b1`` may be zero to switch the mean-field coupling off, and the
    volatilities may be zero for deterministic agent runs; the PDE solvers and
    :func:`check_pde_hypotheses` require them positive.
    """

    a: float = 1.0
    b: float = 1.0
    p1: float = 0.5
    p2: float = 0.5
    variant: str = "plus"
    a0: float = 1.0
    b0: float = 1.0
    sigma1_sq: Expression | float | str = 0.2
    sigma2_sq: Expression | float | str = 0.2
    epsilon: float = 0.1
    g_a1: float = 1.0
    g_b1: float = 1.0
    income: Expression | str = DEFAULT_INCOME
    psi: Expression | str = DEFAULT_PSI
    T: float = 2.0

    def __post_init__(self) -> None:
        for name in ("a", "b", "p1", "p2", "a0", "b0", "epsilon", "T"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0, got {v!r}")
        for name in ("g_a1", "g_b1"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be >= 0, got {v!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("sigma1_sq", "sigma2_sq", "income", "psi"):
            object.__setattr__(self, name, _as_expression(getattr(self, name)))
        for name in ("sigma1_sq", "sigma2_sq"):
            probe = getattr(self, name)(*np.meshgrid(np.linspace(0, 1, 17), np.linspace(0, 1, 17)))
            if np.any(probe < 0) or not np.all(np.isfinite(probe)):
                raise ValueError(f"{name} must be finite and >= 0 on the unit square")

    def replace(self, **changes: Any) -> ModelParams:
        d = self.to_dict()
        d.update(changes)
        return ModelParams(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for name in ("sigma1_sq", "sigma2_sq", "income", "psi"):
            expr = getattr(self, name)
            d[name] = float(expr()) if expr.is_constant() else expr.source
        return d

    def sigma_sq_on(self, grid: Grid, collar: int = 2) -> tuple[NDArray, NDArray]:
        """Volatility-squared fields on the grid.

        Variable coefficients are frozen to a constant (their mean over the
        boundary nodes) within ``collar`` nodes of the boundary so that the
        simplified no-flux conditions stay valid there.
        """
        X, Y = grid.mesh()
        out = []
        for expr in (self.sigma1_sq, self.sigma2_sq):
            s = np.array(expr(X, Y), dtype=float)
            if not expr.is_constant() and collar > 0:
                edge = np.zeros(s.shape, dtype=bool)
                edge[:collar + 1, :] = edge[-collar - 1:, :] = True
                edge[:, :collar + 1] = edge[:, -collar - 1:] = True
                ring = np.zeros(s.shape, dtype=bool)
                ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
                s[edge] = s[ring].mean()
            out.append(s)
        return out[0], out[1]


def check_pde_hypotheses(params: ModelParams, grid: Grid | None = None) -> float:
    """Check uniform ellipticity and return ``sigma0`` with ``sigma^2 >= 2 sigma0``."""
    grid = grid or Grid.square(33)
    s1, s2 = params.sigma_sq_on(grid)
    sigma0 = 0.5 * float(min(s1.min(), s2.min()))
    if not sigma0 > 0:
        raise ValueError("sigma1_sq and sigma2_sq must be > 0 for the PDE solvers")
    return sigma0


def phi1(x, y, params: ModelParams):
    sign = 1.0 if params.variant == "plus" else -1.0
    return params.a * x * ((1.0 - x) + sign * params.p1 * y)


def phi2(x, y, params: ModelParams):
    sign = 1.0 if params.variant == "plus" else -1.0
    return params.b * y * ((1.0 - y) + sign * params.p2 * x)


def running_cost_h(alpha, beta, x, y, params: ModelParams):
    """Control effort cost; ``x, y`` are accepted for position-dependent costs."""
    del x, y
    return 0.5 * params.a0 * np.square(alpha) + 0.5 * params.b0 * np.square(beta)


def income(x, y, t, params: ModelParams):
    return params.income(x, y, t)


def terminal_payoff(x, y, params: ModelParams):
    return params.psi(x, y)


def g_quadratic(u, v, params: ModelParams):
    return 0.5 * params.g_a1 * np.square(u) + 0.5 * params.g_b1 * np.square(v)


@dataclass
class MeanFields:
    """Weighted averages at one time level.

    ``mbar_y[i]`` is the mean hierarchy position of agents at ``x_i`` and
    ``mbar_x[j]`` the mean corruption degree of agents at ``y_j``.
    """

    grid: Grid
    mbar_y: NDArray
    mbar_x: NDArray


def _check_density(values: NDArray) -> None:
    scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
    if np.min(values) < -1e-10 * scale:
        raise ValueError(f"density must be nonnegative (min {np.min(values):.3e})")


def mean_field_arrays(m: NDArray, grid: Grid, epsilon: float) -> tuple[NDArray, NDArray]:
    """Vectorised averages; ``m`` has shape ``(..., ny, nx)``."""
    wx = trapezoid_weights(grid.nx)
    wy = trapezoid_weights(grid.ny)
    y = grid.y[:, None]
    x = grid.x[None, :]
    # integrals along y for each x, and along x for each y
    mass_y = np.tensordot(m, wy, axes=([-2], [0]))
    first_y = np.tensordot(m * y, wy, axes=([-2], [0]))
    mass_x = np.tensordot(m, wx, axes=([-1], [0]))
    first_x = np.tensordot(m * x, wx, axes=([-1], [0]))
    return first_y / (epsilon + mass_y), first_x / (epsilon + mass_x)


def mean_fields(m: ScalarField, params: ModelParams) -> MeanFields:
    if m.grid.dim != 2:
        raise ValueError("mean fields are defined on the 2-D grid")
    _check_density(m.values)
    mbar_y, mbar_x = mean_field_arrays(m.values, m.grid, params.epsilon)
    return MeanFields(m.grid, mbar_y, mbar_x)


def coupling_array(m: NDArray, grid: Grid, params: ModelParams) -> NDArray:
    """``g(x - mbar_y(x), y - mbar_x(y))`` on the grid; leading axes of ``m`` kept."""
    mbar_y, mbar_x = mean_field_arrays(m, grid, params.epsilon)
    X, Y = grid.mesh()
    du = X - mbar_y[..., None, :]
    dv = Y - mbar_x[..., :, None]
    return g_quadratic(du, dv, params)


def coupling_field(m: ScalarField, params: ModelParams) -> ScalarField:
    _check_density(m.values)
    return ScalarField(m.grid, coupling_array(m.values, m.grid, params))


def coupling_G(x, y, m: ScalarField, params: ModelParams):
    """Coupling term at arbitrary points (averages interpolated linearly)."""
    mf = mean_fields(m, params)
    my = np.interp(x, m.grid.x, mf.mbar_y)
    mx = np.interp(y, m.grid.y, mf.mbar_x)
    return g_quadratic(np.asarray(x) - my, np.asarray(y) - mx, params)


def coupling_lipschitz_bound(m1: ScalarField, m2: ScalarField, params: ModelParams) -> float:
    """Largest ratio ``|G[m1] - G[m2]| / (|d mbar_y| + |d mbar_x|)`` over the grid."""
    f1, f2 = mean_fields(m1, params), mean_fields(m2, params)
    G1 = coupling_field(m1, params).values
    G2 = coupling_field(m2, params).values
    denom = np.abs(f1.mbar_y - f2.mbar_y)[None, :] + np.abs(f1.mbar_x - f2.mbar_x)[:, None]
    mask = denom > 1e-12
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(G1 - G2)[mask] / denom[mask]))


def control_gains(grid: Grid, params: ModelParams) -> tuple[NDArray, NDArray]:
    """Nodal ``phi1^2/a0`` and ``phi2^2/b0``."""
    X, Y = grid.mesh()
    return phi1(X, Y, params) ** 2 / params.a0, phi2(X, Y, params) ** 2 / params.b0


def feedback_arrays(u: NDArray, grid: Grid, params: ModelParams) -> tuple[NDArray, NDArray]:
    """Optimal controls ``(alpha, beta)`` at every node (leading axes allowed)."""
    ux, uy = gradient_array(u, grid)
    X, Y = grid.mesh()
    return -phi1(X, Y, params) / params.a0 * ux, -phi2(X, Y, params) / params.b0 * uy


def optimal_controls(u: ScalarField, x, y, params: ModelParams):
    """Feedback controls at ``(x, y)``; the gradient is bilinearly interpolated
    between nodes and exact at nodes."""
    ux, uy = gradient_array(u.values, u.grid)
    gx = bilinear(ux, u.grid, x, y)
    gy = bilinear(uy, u.grid, x, y)
    alpha = -phi1(x, y, params) / params.a0 * gx
    beta = -phi2(x, y, params) / params.b0 * gy
    return alpha, beta


def hamiltonian(x, y, t, m: ScalarField, p_vec, alpha, beta, params: ModelParams):
    p1_, p2_ = p_vec
    return (
        alpha * phi1(x, y, params) * p1_
        + beta * phi2(x, y, params) * p2_
        - income(x, y, t, params)
        + running_cost_h(alpha, beta, x, y, params)
        + coupling_G(x, y, m, params)
    )


def bilinear(values: NDArray, grid: Grid, x, y) -> NDArray:
    """Bilinear interpolation of nodal values at points inside the square."""
    x = np.clip(np.asarray(x, float), 0.0, 1.0)
    y = np.clip(np.asarray(y, float), 0.0, 1.0)
    fx = x / grid.hx
    fy = y / grid.hy
    i = np.minimum(fx.astype(int), grid.nx - 2)
    j = np.minimum(fy.astype(int), grid.ny - 2)
    sx = fx - i
    sy = fy - j
    v00 = values[..., j, i]
    v01 = values[..., j, i + 1]
    v10 = values[..., j + 1, i]
    v11 = values[..., j + 1, i + 1]
    return (1 - sy) * ((1 - sx) * v00 + sx * v01) + sy * ((1 - sx) * v10 + sx * v11)
