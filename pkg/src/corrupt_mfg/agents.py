"""Monte Carlo agents driven by the controlled SDE.

Each agent moves by Euler-Maruyama steps, is reflected (folded) off the faces
``x = 0``, ``y = 0`` and ``y = 1`` and is absorbed when it crosses ``x = 1``.
Absorption is only checked at the end of a step, which leaves an
``O(sqrt(dt))`` boundary bias; that is accepted for validation runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .grid import Grid, SpaceTimeField, TimeGrid
from .model import (
    ModelParams,
    bilinear,
    coupling_array,
    g_quadratic,
    income,
    phi1,
    phi2,
    running_cost_h,
)

CONTROL_MODES = ("zero", "feedback")


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 10_000
    dt_sim: float = 1e-3
    seed: int = 0
    control_mode: str = "feedback"
    nt_record: int = 64

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be > 0")
        if self.control_mode not in CONTROL_MODES:
            raise ValueError(f"control_mode must be one of {CONTROL_MODES}")


@dataclass
class AgentEnsemble:
    positions: NDArray
    alive: NDArray
    absorption_time: NDArray
    accumulated_cost: NDArray
    rng_seed: int
    t: float = 0.0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.rng is None:
            self.rng = np.random.Generator(np.random.Philox(key=self.rng_seed))

    @classmethod
    def at_point(cls, n: int, x: float, y: float, seed: int = 0) -> AgentEnsemble:
        return cls.from_positions(np.tile([x, y], (n, 1)), seed)

    @classmethod
    def from_positions(cls, positions, seed: int = 0) -> AgentEnsemble:
        pos = np.array(positions, dtype=float).reshape(-1, 2)
        if np.any(pos < 0) or np.any(pos > 1):
            raise ValueError("initial positions must lie in the unit square")
        n = len(pos)
        return cls(pos, np.ones(n, bool), np.full(n, np.nan), np.zeros(n), seed)

    @classmethod
    def sample_density(cls, n: int, density: NDArray, grid: Grid, seed: int = 0) -> AgentEnsemble:
        """Draw agents from a nodal density (cell-uniform within the chosen cell)."""
        rng = np.random.Generator(np.random.Philox(key=seed + 0x5EED))
        cell = 0.25 * (density[:-1, :-1] + density[1:, :-1] + density[:-1, 1:] + density[1:, 1:])
        p = np.clip(cell, 0, None).ravel()
        k = rng.choice(p.size, size=n, p=p / p.sum())
        j, i = np.divmod(k, grid.nx - 1)
        x = (i + rng.random(n)) * grid.hx
        y = (j + rng.random(n)) * grid.hy
        return cls.from_positions(np.column_stack([x, y]), seed)

    @property
    def n_agents(self) -> int:
        return len(self.alive)


@dataclass
class SimulationResult:
    ensemble: AgentEnsemble
    times: NDArray
    positions: NDArray
    alive: NDArray
    mean_cost: float
    stderr: float

    @property
    def alive_fraction(self) -> NDArray:
        return self.alive.mean(axis=1)


def _fold(v: NDArray) -> NDArray:
    """Reflect into [0, 1] by repeated folding."""
    v = np.mod(v, 2.0)
    return np.where(v > 1.0, 2.0 - v, v)


def _volatility(expr, x, y):
    if expr.constant_value is not None:
        return math.sqrt(expr.constant_value)
    return np.sqrt(expr(x, y))


def step_sde(ensemble: AgentEnsemble, controls, params: ModelParams, dt: float) -> AgentEnsemble:
    """One Euler-Maruyama step for the alive agents (in place; also returned).

    Agents that end the step beyond ``x = 1`` are absorbed at ``(1, y)`` and are
    charged the terminal payoff there.
    """
    alpha, beta = controls
    live = ensemble.alive
    pos = ensemble.positions
    everyone = bool(live.all())
    idx = slice(None) if everyone else np.flatnonzero(live)
    x, y = pos[idx, 0], pos[idx, 1]
    n_live = x.size
    if np.ndim(alpha) and np.shape(alpha)[0] != n_live:
        alpha = alpha[idx]
    if np.ndim(beta) and np.shape(beta)[0] != n_live:
        beta = beta[idx]
    # draw for every agent so the stream position does not depend on absorptions
    noise = ensemble.rng.standard_normal((2, live.size))
    if not everyone:
        noise = noise[:, idx]
    s1 = _volatility(params.sigma1_sq, x, y)
    s2 = _volatility(params.sigma2_sq, x, y)
    sq = math.sqrt(dt)
    xn = x + alpha * phi1(x, y, params) * dt + s1 * sq * noise[0]
    yn = y + beta * phi2(x, y, params) * dt + s2 * sq * noise[1]
    yn = _fold(yn)
    xn = np.where(xn < 0.0, -xn, xn)
    t_new = ensemble.t + dt
    hit = xn >= 1.0
    if hit.any():
        xn = np.where(hit, 1.0, xn)
        absorbed = np.flatnonzero(live)[hit]
        ensemble.alive[absorbed] = False
        ensemble.absorption_time[absorbed] = t_new
        ensemble.accumulated_cost[absorbed] += params.psi(np.ones(hit.sum()), yn[hit])
    pos[idx, 0] = xn
    pos[idx, 1] = yn
    ensemble.t = t_new
    return ensemble


class _FieldSampler:
    """Space-bilinear, time-linear interpolation of gridded fields."""

    def __init__(self, values: NDArray, grid: Grid, time: TimeGrid):
        self.values, self.grid, self.time = values, grid, time

    def __call__(self, t: float, x: NDArray, y: NDArray) -> NDArray:
        s = min(max(t / self.time.dt, 0.0), self.time.nt - 1.0)
        n = min(int(s), self.time.nt - 2)
        w = s - n
        a = bilinear(self.values[n], self.grid, x, y)
        if w == 0.0:
            return a
        return (1 - w) * a + w * bilinear(self.values[n + 1], self.grid, x, y)


def simulate(
    ensemble_init: AgentEnsemble,
    u: SpaceTimeField | None,
    params: ModelParams,
    sim_cfg: SimConfig,
    m: SpaceTimeField | None = None,
) -> SimulationResult:
    """Run agents over ``[0, T]`` and accumulate the realised cost.

    The running cost is ``-c + h + g`` evaluated at the left end of each step;
    the mean-field averages inside ``g`` come from the PDE density ``m`` (taken
    as zero when ``m`` is omitted).  Positions are recorded at the time levels
    of ``u`` (or at ``sim_cfg.nt_record`` levels when no field is given).
    """
    if sim_cfg.control_mode == "feedback" and u is None:
        raise ValueError("feedback mode needs a value function")
    ref = u if u is not None else m
    if ref is not None:
        grid, time = ref.grid, ref.time
        if not math.isclose(time.T, params.T):
            raise ValueError("field horizon differs from params.T")
    else:
        grid, time = None, TimeGrid(params.T, sim_cfg.nt_record)
    ens = ensemble_init
    n = ens.n_agents

    grad = None
    if sim_cfg.control_mode == "feedback":
        from .grid import gradient_array

        ux, uy = gradient_array(u.values, grid)
        grad = (_FieldSampler(ux, grid, time), _FieldSampler(uy, grid, time))
    coupling = None
    if m is not None:
        coupling = _FieldSampler(coupling_array(np.maximum(m.values, 0), m.grid, params), m.grid, m.time)

    sub = max(1, math.ceil(time.dt / sim_cfg.dt_sim - 1e-9))
    dt = time.dt / sub
    positions = np.empty((time.nt, n, 2))
    alive = np.empty((time.nt, n), dtype=bool)
    positions[0] = ens.positions
    alive[0] = ens.alive
    zeros = np.zeros(n)
    for level in range(time.nt - 1):
        for _ in range(sub):
            live = ens.alive
            if not np.any(live):
                ens.t += dt
                continue
            x, y = ens.positions[live, 0], ens.positions[live, 1]
            t = ens.t
            if grad is not None:
                a = -phi1(x, y, params) / params.a0 * grad[0](t, x, y)
                b = -phi2(x, y, params) / params.b0 * grad[1](t, x, y)
            else:
                a = b = zeros[: x.size]
            G = coupling(t, x, y) if coupling is not None else g_quadratic(x, y, params)
            run = -income(x, y, t, params) + running_cost_h(a, b, x, y, params) + G
            ens.accumulated_cost[live] += dt * run
            step_sde(ens, (a, b), params, dt)
        positions[level + 1] = ens.positions
        alive[level + 1] = ens.alive
    live = ens.alive
    ens.accumulated_cost[live] += params.psi(ens.positions[live, 0], ens.positions[live, 1])
    cost = ens.accumulated_cost
    stderr = float(cost.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return SimulationResult(ens, time.t, positions, alive, float(cost.mean()), stderr)


def empirical_density(
    positions: NDArray,
    alive: NDArray,
    grid: Grid,
    time: TimeGrid,
    bandwidth: float | None = None,
) -> SpaceTimeField:
    """Gaussian KDE of alive agents at each recorded level.

    Kernels are mirrored across the reflecting faces; each level is scaled so
    that its trapezoid integral equals the alive fraction.
    """
    h = bandwidth if bandwidth is not None else 1.5 * grid.hx
    out = np.zeros((time.nt, *grid.shape))
    w = grid.weights()
    n = positions.shape[1]
    for k in range(time.nt):
        pts = positions[k][alive[k]]
        if len(pts) == 0:
            continue
        xa, ya = pts[:, 0], pts[:, 1]
        kx = _gauss(grid.x[None, :] - xa[:, None], h) + _gauss(grid.x[None, :] + xa[:, None], h)
        ky = (
            _gauss(grid.y[None, :] - ya[:, None], h)
            + _gauss(grid.y[None, :] + ya[:, None], h)
            + _gauss(grid.y[None, :] - (2.0 - ya[:, None]), h)
        )
        dens = ky.T @ kx
        total = float(np.sum(w * dens))
        if total > 0:
            out[k] = dens * (len(pts) / n) / total
    return SpaceTimeField(grid, time, out)


def _gauss(d: NDArray, h: float) -> NDArray:
    return np.exp(-0.5 * (d / h) ** 2) / (math.sqrt(2 * math.pi) * h)


def logistic_check(dt: float = 1e-4, beta: float = 1.0, y0: float = 0.5, t_long: float = 20.0) -> dict:
    """Deterministic career growth at ``x = 0`` against the closed-form logistic.

    ``y(1)`` is simulated with step ``dt``; the run to ``t_long`` continues with
    a step a hundred times larger.
    """
    params = ModelParams(b=1.0, sigma1_sq=0.0, sigma2_sq=0.0)
    ens = AgentEnsemble.at_point(1, 0.0, y0)
    ctrl = (np.zeros(1), np.full(1, beta))
    steps = round(1.0 / dt)
    for _ in range(steps):
        step_sde(ens, ctrl, params, dt)
    y1 = float(ens.positions[0, 1])
    exact = 1.0 / (1.0 + (1.0 / y0 - 1.0) * math.exp(-beta * params.b * 1.0))
    coarse = 100 * dt
    for _ in range(round((t_long - 1.0) / coarse)):
        step_sde(ens, ctrl, params, coarse)
    return {"y1": y1, "y1_exact": exact, "error": abs(y1 - exact), "y_long": float(ens.positions[0, 1]), "t_long": t_long}
