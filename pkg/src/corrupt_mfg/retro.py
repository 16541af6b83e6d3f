"""Reconstruction of the past from noisy terminal snapshots.

Given ``u(., T)`` and ``m(., T)`` (both with ``H^1`` noise of level ``delta``),
the value function is recovered by the well-posed backward solve, while the
density needs the ill-posed backward-in-time inversion of the Fokker-Planck
equation.  For a frozen ``u`` that map is linear in ``m(., 0)``, so it is
inverted with Tikhonov regularisation (``H^1`` penalty) and preconditioned
conjugate gradients on the normal equations, using the exact discrete adjoint.
An outer loop alternates the two steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import LinearOperator, cg, splu

from .grid import Grid, ScalarField, SpaceTimeField, TimeGrid, h1_norm, trapezoid_weights
from .model import Expression, ModelParams
from .solvers import FPOperator, MFGSolution, SolverConfig, solve_hjb_backward, solve_mfg

log = logging.getLogger(__name__)

NOISE_MAX_MODE = 6
DEFAULT_M0 = "cos(pi*x/2)*(1 + 0.3*cos(pi*y))"
NORM_NAMES = ("u_t", "u_xx", "u_xy", "u_yy", "grad_u", "u", "grad_m", "m")


@dataclass(frozen=True)
class NoisySnapshot:
    u_T_noisy: ScalarField
    m_T_noisy: ScalarField
    delta: float
    seed: int

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class RetroConfig:
    gamma: float = 1.25
    tikhonov_alpha: float | str = "auto"
    cg_iters: int = 400
    cg_tol: float = 1e-8
    outer_iters: int = 12
    picard_tol: float = 1e-6
    s1_hat: float = 2.0
    T: float = 2.0

    def __post_init__(self) -> None:
        if not 1.0 < self.gamma < self.T:
            raise ValueError(f"gamma must lie in (1, T) = (1, {self.T}), got {self.gamma}")
        if self.tikhonov_alpha != "auto" and not (
            isinstance(self.tikhonov_alpha, (int, float)) and self.tikhonov_alpha > 0
        ):
            raise ValueError(f"tikhonov_alpha must be > 0 or 'auto', got {self.tikhonov_alpha!r}")
        if self.cg_iters < 1 or self.outer_iters < 1:
            raise ValueError("cg_iters and outer_iters must be >= 1")
        if not self.s1_hat > 0:
            raise ValueError("s1_hat must be > 0")

    def alpha_for(self, delta: float) -> float:
        """Regularisation parameter; ``auto`` means ``delta^2`` (floored at 1e-12)."""
        if self.tikhonov_alpha == "auto":
            return max(delta**2, 1e-12)
        return float(self.tikhonov_alpha)


@dataclass
class TikhonovInfo:
    iterations: int
    relative_residual: float
    converged: bool


@dataclass
class RetroSolution(MFGSolution):
    m0: NDArray | None = None
    alpha: float = 0.0
    cg: list[TikhonovInfo] = field(default_factory=list)

    @property
    def cg_converged(self) -> bool:
        return all(info.converged for info in self.cg)


@dataclass
class StabilityRecord:
    delta: float
    seed: int
    norms: dict[str, float]
    norms_full: dict[str, float]
    total: float
    lam: float | None
    m0_error: float
    converged: bool
    failed: bool = False
    bounds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "seed": self.seed,
            "norms": self.norms,
            "norms_full": self.norms_full,
            "total": self.total,
            "lambda": self.lam,
            "m0_relative_error": self.m0_error,
            "converged": self.converged,
            "failed": self.failed,
            "bounds": self.bounds,
        }


@dataclass
class StabilityResult:
    records: list[StabilityRecord]
    rho_emp: float | None
    solutions: dict[tuple[float, int], RetroSolution] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records], "rho_emp": self.rho_emp}


# ---------------------------------------------------------------------------
# data


def noise_field(grid: Grid, delta: float, rng: np.random.Generator) -> NDArray:
    """Random cosine series (modes <= 6) with ``h1_norm == delta``.

    The ``x``-factors ``cos((k + 1/2) pi x)`` vanish on the absorbing face, so
    the perturbation is compatible with the boundary conditions.
    """
    X, Y = grid.mesh()
    eta = np.zeros(grid.shape)
    coef = rng.standard_normal((NOISE_MAX_MODE + 1, NOISE_MAX_MODE + 1))
    for k in range(NOISE_MAX_MODE + 1):
        cx = np.cos((k + 0.5) * np.pi * X)
        for j in range(NOISE_MAX_MODE + 1):
            eta += coef[k, j] * cx * np.cos(j * np.pi * Y)
    norm = h1_norm(ScalarField(grid, eta))
    return eta * (delta / norm)


def add_noise(f_true: ScalarField, delta: float, seed: int) -> ScalarField:
    """``f_true`` plus a band-limited perturbation of ``H^1`` norm exactly ``delta``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return ScalarField(f_true.grid, f_true.values.copy())
    rng = np.random.Generator(np.random.Philox(key=seed))
    return ScalarField(f_true.grid, f_true.values + noise_field(f_true.grid, delta, rng))


def make_snapshot(u_T: ScalarField, m_T: ScalarField, delta: float, seed: int) -> NoisySnapshot:
    """Independent perturbations for the two fields (derived seeds)."""
    su, sm = np.random.SeedSequence(seed).generate_state(2)
    return NoisySnapshot(add_noise(u_T, delta, int(su)), add_noise(m_T, delta, int(sm)), delta, seed)


def schedule_alpha(T: float, s1_hat: float) -> float:
    return 1.0 / (3.0 * (T + 2.0) ** s1_hat)


def lambda_of_delta(delta: float, T: float = 2.0, s1_hat: float = 2.0) -> float:
    """``lambda = ln(delta^{-alpha})`` with ``alpha = 1 / (3 (T+2)^{s1})``.

    Admissible noise levels are ``0 < delta <= exp(-1/alpha)`` (so that
    ``lambda >= 1``).
    """
    alpha = schedule_alpha(T, s1_hat)
    bound = math.exp(-1.0 / alpha)
    if not 0 < delta <= bound:
        raise ValueError(f"delta must lie in (0, exp(-1/alpha)] = (0, {bound:.6e}], got {delta!r}")
    return -alpha * math.log(delta)


# ---------------------------------------------------------------------------
# inversion


def stiffness_matrix(grid: Grid) -> sp.csr_matrix:
    """Matrix of the discrete ``|grad m|^2`` integral (forward differences)."""
    def d1(n: int, h: float) -> sp.csr_matrix:
        return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h

    Dx, Dy = d1(grid.nx, grid.hx), d1(grid.ny, grid.hy)
    wx, wy = trapezoid_weights(grid.nx), trapezoid_weights(grid.ny)
    Ix, Iy = sp.diags(wx), sp.diags(wy)
    Sx = sp.kron(Iy, Dx.T @ (grid.hx * sp.identity(grid.nx - 1)) @ Dx)
    Sy = sp.kron(Dy.T @ (grid.hy * sp.identity(grid.ny - 1)) @ Dy, Ix)
    return (Sx + Sy).tocsr()


def tikhonov_solve(
    op: FPOperator,
    data: NDArray,
    alpha: float,
    *,
    x0: NDArray | None = None,
    maxiter: int = 400,
    rtol: float = 1e-8,
) -> tuple[NDArray, TikhonovInfo]:
    """Minimise ``||F m0 - data||_W^2 + alpha m0^T (W + S) m0`` by PCG.

    ``W`` holds trapezoid weights and ``S`` is the stiffness matrix, so the
    penalty is a discrete ``H^1`` norm.  The preconditioner is ``alpha (W + S)``.
    Nodes on the absorbing face are fixed to zero.
    """
    grid = op.grid
    w = grid.weights().ravel()
    free = ~op.dirichlet
    # m0 vanishes on the absorbing face, so only the other nodes are unknowns
    R = (sp.diags(w) + stiffness_matrix(grid)).tocsr()[free][:, free].tocsc()
    R_lu = splu(R)
    n = int(free.sum())

    def lift(z: NDArray) -> NDArray:
        full = np.zeros(grid.size)
        full[free] = z
        return full

    def normal(z: NDArray) -> NDArray:
        Fz = op.terminal(lift(z)).ravel()
        return op.terminal_adjoint(w * Fz).ravel()[free] + alpha * (R @ z)

    A = LinearOperator((n, n), matvec=normal, dtype=float)
    M = LinearOperator((n, n), matvec=lambda r: R_lu.solve(r) / alpha, dtype=float)
    b = op.terminal_adjoint(w * np.asarray(data, dtype=float).ravel()).ravel()[free]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(grid.shape), TikhonovInfo(0, 0.0, True)
    count = [0]

    def tick(_):
        count[0] += 1

    start = None if x0 is None else np.asarray(x0, dtype=float).ravel()[free]
    z, info = cg(A, b, x0=start, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=tick)
    rel = float(np.linalg.norm(b - normal(z)) / bnorm)
    if info != 0:
        log.warning("CG stopped after %d iterations with relative residual %.2e", count[0], rel)
    x = lift(z)
    return x.reshape(grid.shape), TikhonovInfo(count[0], rel, info == 0)


def reconstruct(
    u_T_noisy: ScalarField,
    m_T_noisy: ScalarField,
    params: ModelParams,
    cfg: RetroConfig,
    *,
    nt: int = 64,
    delta: float = 0.0,
    m_init: SpaceTimeField | None = None,
) -> RetroSolution:
    """Alternate backward HJB solves and regularised density inversions.

    ``delta`` is only used by ``tikhonov_alpha="auto"``.  The initial density
    trajectory defaults to zero.
    """
    grid = u_T_noisy.grid
    time = TimeGrid(params.T, nt)
    alpha = cfg.alpha_for(delta)
    m_traj = m_init if m_init is not None else SpaceTimeField(grid, time, np.zeros((nt, *grid.shape)))
    u_prev = None
    m0 = None
    history: list[float] = []
    infos: list[TikhonovInfo] = []
    best = None
    for k in range(1, cfg.outer_iters + 1):
        u = solve_hjb_backward(u_T_noisy, m_traj, params)
        op = FPOperator(u, params)
        m0, info = tikhonov_solve(op, m_T_noisy.values, alpha, x0=m0, maxiter=cfg.cg_iters, rtol=cfg.cg_tol)
        infos.append(info)
        m_new = SpaceTimeField(grid, time, op.propagate(m0))
        du = math.inf if u_prev is None else float(np.max(np.abs(u.values - u_prev.values)))
        change = du + float(np.max(np.abs(m_new.values - m_traj.values)))
        history.append(change)
        log.debug("outer iteration %d change %.3e (cg %d its)", k, change, info.iterations)
        if best is None or change < best[0]:
            best = (change, u, m_new, m0.copy())
        m_traj, u_prev = m_new, u
        if change < cfg.picard_tol:
            return RetroSolution(u, m_new, k, history, True, m0=m0, alpha=alpha, cg=infos)
    _, u_b, m_b, m0_b = best
    return RetroSolution(u_b, m_b, cfg.outer_iters, history, False, m0=m0_b, alpha=alpha, cg=infos)


# ---------------------------------------------------------------------------
# stability experiment


def _window_weights(time: TimeGrid, t_start: float) -> NDArray:
    """Trapezoid weights over the nodes with ``t >= t_start``."""
    t = time.t
    keep = t >= t_start - 1e-12
    w = np.zeros(time.nt)
    idx = np.flatnonzero(keep)
    if len(idx) >= 2:
        seg = np.diff(t[idx])
        w[idx[:-1]] += 0.5 * seg
        w[idx[1:]] += 0.5 * seg
    return w


def error_norms(
    u_err: SpaceTimeField,
    m_err: SpaceTimeField,
    t_start: float = 0.0,
) -> dict[str, float]:
    """The eight ``L^2`` error norms over ``Omega x (t_start, T)``."""
    grid, time = u_err.grid, u_err.time
    ws = grid.weights()
    wt = _window_weights(time, t_start)
    hx, hy = grid.hx, grid.hy
    u = u_err.values
    m = m_err.values
    ux = np.gradient(u, hx, axis=2, edge_order=2)
    uy = np.gradient(u, hy, axis=1, edge_order=2)
    fields = {
        "u_t": [np.gradient(u, time.dt, axis=0, edge_order=2)],
        "u_xx": [np.gradient(ux, hx, axis=2, edge_order=2)],
        "u_xy": [np.gradient(ux, hy, axis=1, edge_order=2)],
        "u_yy": [np.gradient(uy, hy, axis=1, edge_order=2)],
        "grad_u": [ux, uy],
        "u": [u],
        "grad_m": [np.gradient(m, hx, axis=2, edge_order=2), np.gradient(m, hy, axis=1, edge_order=2)],
        "m": [m],
    }
    out = {}
    for name, parts in fields.items():
        sq = sum(np.tensordot(p**2, ws, axes=2) for p in parts)
        out[name] = float(math.sqrt(max(float(np.dot(wt, sq)), 0.0)))
    return out


def solution_bounds(sol: MFGSolution) -> dict[str, float]:
    """Sup norms used to monitor the a priori bounded set (not enforced)."""
    grid = sol.u.grid
    u, m = sol.u.values, sol.m.values
    ux = np.gradient(u, grid.hx, axis=2, edge_order=2)
    uy = np.gradient(u, grid.hy, axis=1, edge_order=2)
    second = [
        np.gradient(ux, grid.hx, axis=2, edge_order=2),
        np.gradient(ux, grid.hy, axis=1, edge_order=2),
        np.gradient(uy, grid.hy, axis=1, edge_order=2),
    ]
    return {
        "u_sup": float(np.abs(u).max()),
        "grad_u_sup": float(max(np.abs(ux).max(), np.abs(uy).max())),
        "hess_u_sup": float(max(np.abs(s).max() for s in second)),
        "m_sup": float(np.abs(m).max()),
        "grad_m_sup": float(
            max(
                np.abs(np.gradient(m, grid.hx, axis=2, edge_order=2)).max(),
                np.abs(np.gradient(m, grid.hy, axis=1, edge_order=2)).max(),
            )
        ),
    }


def ground_truth(
    params: ModelParams,
    grid: Grid,
    nt: int = 64,
    m0_expr: str = DEFAULT_M0,
    solver_cfg: SolverConfig | None = None,
    fine_data: bool = False,
) -> tuple[MFGSolution, ScalarField]:
    """Forward solve used to generate synthetic data; returns it and ``m0``.

    With ``fine_data`` the forward problem is solved on a grid refined by two in
    space and time and injected back onto ``grid``.
    """
    cfg = solver_cfg or SolverConfig(nt=nt)
    expr = Expression(m0_expr)
    work_grid = grid.refined() if fine_data else grid
    work_nt = 2 * nt - 1 if fine_data else nt
    X, Y = work_grid.mesh()
    m0 = np.broadcast_to(expr(X, Y), work_grid.shape).copy()
    m0[:, -1] = 0.0
    m0 /= float(np.sum(work_grid.weights() * m0))
    uT = np.broadcast_to(params.psi(X, Y), work_grid.shape).copy()
    sol = solve_mfg(
        ScalarField(work_grid, m0),
        ScalarField(work_grid, uT),
        params,
        SolverConfig(cfg.max_picard_iters, cfg.picard_tol, cfg.damping, cfg.scheme, work_nt),
    )
    if not fine_data:
        return sol, ScalarField(grid, m0)
    time = TimeGrid(params.T, nt)
    u = SpaceTimeField(grid, time, sol.u.values[::2, ::2, ::2])
    m = SpaceTimeField(grid, time, sol.m.values[::2, ::2, ::2])
    coarse = MFGSolution(u, m, sol.iterations, sol.residual_history, sol.converged)
    return coarse, ScalarField(grid, m0[::2, ::2])


def fit_exponent(deltas, totals) -> float | None:
    """Least-squares slope of ``log(total)`` against ``log(delta)``."""
    d = np.asarray(deltas, dtype=float)
    e = np.asarray(totals, dtype=float)
    keep = (d > 0) & (e > 0) & np.isfinite(e)
    if np.unique(d[keep]).size < 2:
        return None
    slope, _ = np.polyfit(np.log(d[keep]), np.log(e[keep]), 1)
    return float(slope)


def stability_experiment(
    params: ModelParams,
    cfg: RetroConfig,
    delta_list,
    seeds=(0,),
    *,
    grid: Grid | None = None,
    nt: int = 64,
    m0_expr: str = DEFAULT_M0,
    fine_data: bool = False,
    executor=None,
    truth: tuple[MFGSolution, ScalarField] | None = None,
) -> StabilityResult:
    """Noise sweep: reconstruct from perturbed data and measure the errors.

    Errors are measured on the window ``t >= gamma``; ``rho_emp`` is the
    log-log slope of the summed norms against ``delta`` (records that failed
    or have ``delta = 0`` are excluded from the fit).
    """
    deltas = list(delta_list)
    if any(d < 0 for d in deltas):
        raise ValueError("noise levels must be >= 0")
    if any(b > a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta_list must be decreasing")
    if not math.isclose(cfg.T, params.T):
        raise ValueError("RetroConfig.T must equal params.T")
    grid = grid or Grid.square(33)
    sol_true, m0_true = truth if truth is not None else ground_truth(params, grid, nt, m0_expr, fine_data=fine_data)
    uT = sol_true.u.at(nt - 1)
    mT = sol_true.m.at(nt - 1)

    def cell(args):
        delta, seed = args
        snap = make_snapshot(uT, mT, delta, seed)
        try:
            lam = lambda_of_delta(delta, params.T, cfg.s1_hat) if delta > 0 else None
        except ValueError:
            lam = None
        try:
            rec_sol = reconstruct(snap.u_T_noisy, snap.m_T_noisy, params, cfg, nt=nt, delta=delta)
        except (RuntimeError, ValueError) as exc:
            log.warning("reconstruction failed for delta=%g seed=%d: %s", delta, seed, exc)
            nan = {k: math.nan for k in NORM_NAMES}
            return StabilityRecord(delta, seed, nan, nan, math.nan, lam, math.nan, False, True), None
        u_err = SpaceTimeField(grid, sol_true.u.time, rec_sol.u.values - sol_true.u.values)
        m_err = SpaceTimeField(grid, sol_true.m.time, rec_sol.m.values - sol_true.m.values)
        norms = error_norms(u_err, m_err, cfg.gamma)
        full = error_norms(u_err, m_err, 0.0)
        w = grid.weights()
        m0_err = float(np.sqrt(np.sum(w * (rec_sol.m0 - m0_true.values) ** 2) / np.sum(w * m0_true.values**2)))
        record = StabilityRecord(
            delta, seed, norms, full, float(sum(norms.values())), lam, m0_err,
            rec_sol.converged and rec_sol.cg_converged, False, solution_bounds(rec_sol),
        )
        return record, rec_sol

    cells = [(d, s) for d in deltas for s in seeds]
    results = list(executor.map(cell, cells)) if executor is not None else [cell(c) for c in cells]
    records = [r for r, _ in results]
    solutions = {(r.delta, r.seed): s for r, s in results if s is not None}
    valid = [r for r in records if not r.failed and r.delta > 0]
    rho = fit_exponent([r.delta for r in valid], [r.total for r in valid])
    return StabilityResult(records, rho, solutions)
