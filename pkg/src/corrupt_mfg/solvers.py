"""Finite-difference solvers for the coupled HJB / Fokker-Planck system.

Both equations are marched with an IMEX splitting: the diffusion is implicit
and split per axis (one tridiagonal system per row, then per column), while
the Hamiltonian and the Fokker-Planck transport are explicit.  The transport is
a node-centred finite-volume upwind scheme whose control volumes are halved at
the boundary, so that trapezoid mass is conserved exactly under no-flux
conditions.

Boundary conditions: ``u = Psi(1, y)`` and ``m = 0`` on the absorbing face
``x = 1``; zero normal derivative on the other three faces.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import splu

from .grid import Grid, ScalarField, SpaceTimeField, TimeGrid, gradient_array, integrate_space
from .model import (
    ModelParams,
    check_pde_hypotheses,
    control_gains,
    coupling_array,
    income,
    phi1,
    phi2,
)

log = logging.getLogger(__name__)

BOUNDARY_MODES = ("absorbing", "neumann")


class SolverDivergence(RuntimeError):
    """A solve produced non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at time step {step}")
        self.step = step


class SchemeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_picard_iters: int = 50
    picard_tol: float = 1e-6
    damping: float = 0.5
    scheme: str = "imex-split"
    nt: int = 64

    def __post_init__(self) -> None:
        if not self.picard_tol > 0:
            raise ValueError(f"picard_tol must be > 0, got {self.picard_tol}")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_picard_iters < 1:
            raise ValueError("max_picard_iters must be >= 1")
        if self.scheme != "imex-split":
            raise ValueError(f"unknown time-stepping scheme {self.scheme!r}")
        if self.nt < 2:
            raise ValueError("nt must be >= 2")


@dataclass
class MFGSolution:
    u: SpaceTimeField
    m: SpaceTimeField
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False

    def mass_history(self) -> list[float]:
        return [integrate_space(self.m.at(n)) for n in range(self.m.time.nt)]


def second_difference(n: int, h: float, dirichlet_last: bool = False) -> sp.csr_matrix:
    """Second difference with mirrored ghost nodes (zero normal derivative).

    With ``dirichlet_last`` the last row is left empty, to be replaced by an
    identity row in the implicit system.
    """
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    D = sp.diags([lower, main, upper], [-1, 0, 1], shape=(n, n), format="lil")
    if dirichlet_last:
        D[n - 1, :] = 0.0
    return (D / h**2).tocsr()


class _Stencils:
    """Kronecker-structured diffusion operators on a 2-D grid."""

    def __init__(self, grid: Grid, absorbing: bool):
        if grid.dim != 2:
            raise ValueError("the MFG solvers work on the 2-D grid")
        self.grid = grid
        self.absorbing = absorbing
        nx, ny = grid.nx, grid.ny
        Ix, Iy = sp.identity(nx), sp.identity(ny)
        Dxx = second_difference(nx, grid.hx, dirichlet_last=absorbing)
        Dyy = second_difference(ny, grid.hy)
        self.Kx = sp.kron(Iy, Dxx, format="csr")
        self.Ky = sp.kron(Dyy, Ix, format="csr")
        self.dirichlet = np.zeros(grid.shape, dtype=bool)
        if absorbing:
            self.dirichlet[:, -1] = True
        self.dflat = self.dirichlet.ravel()
        keep = sp.diags((~self.dflat).astype(float))
        self.Ky = (keep @ self.Ky).tocsr()

    def implicit(self, K: sp.csr_matrix, coef: NDArray, dt: float, conservative: bool):
        """LU of ``I - dt*K*diag(coef)`` (conservative) or ``I - dt*diag(coef)*K``."""
        C = sp.diags(coef.ravel())
        A = K @ C if conservative else C @ K
        M = (sp.identity(self.grid.size) - dt * A).tocsc()
        return splu(M)


def _check_finite(values: NDArray, step: int, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise SolverDivergence(f"{what} blew up", step)


def _hamiltonian_gradient(u: NDArray, grid: Grid) -> tuple[NDArray, NDArray]:
    ux, uy = gradient_array(u, grid)
    ux = ux.copy()
    uy = uy.copy()
    ux[:, 0] = 0.0
    uy[0, :] = 0.0
    uy[-1, :] = 0.0
    return ux, uy


def solve_hjb_backward(
    u_T: ScalarField,
    m: SpaceTimeField,
    params: ModelParams,
    *,
    clip_density: bool = True,
) -> SpaceTimeField:
    """March the HJB equation backward from ``u(., T) = u_T``.

    ``m`` supplies the coupling term at every time level.  Densities carrying
    small negative values (e.g. reconstructions from noisy data) are clipped at
    zero before the averages are taken when ``clip_density`` is set.
    """
    grid, time = m.grid, m.time
    if u_T.grid != grid:
        raise ValueError("u_T and m live on different grids")
    check_pde_hypotheses(params, grid)
    dt = time.dt
    st = _Stencils(grid, absorbing=True)
    s1, s2 = params.sigma_sq_on(grid)
    lu_x = st.implicit(st.Kx, 0.5 * s1, dt, conservative=False)
    lu_y = st.implicit(st.Ky, 0.5 * s2, dt, conservative=False)
    kx, ky = control_gains(grid, params)
    X, Y = grid.mesh()
    psi_edge = params.psi(np.ones(grid.ny), grid.y)

    dens = np.maximum(m.values, 0.0) if clip_density else m.values
    G = coupling_array(dens, grid, params)

    ux_max = np.max(np.abs(gradient_array(u_T.values, grid)[0])) + 1e-300
    speed = max(np.max(kx), np.max(ky)) * ux_max
    if dt * speed * (1 / grid.hx + 1 / grid.hy) > 1.0:
        warnings.warn(
            f"dt={dt:.3g} exceeds the explicit Hamiltonian step estimate "
            f"{1.0 / (speed * (1 / grid.hx + 1 / grid.hy)):.3g}",
            SchemeWarning,
            stacklevel=2,
        )

    u = np.empty((time.nt, *grid.shape))
    u[-1] = u_T.values
    t = time.t
    for n in range(time.nt - 2, -1, -1):
        ux, uy = _hamiltonian_gradient(u[n + 1], grid)
        rhs = u[n + 1] + dt * (
            -0.5 * kx * ux**2 - 0.5 * ky * uy**2 - income(X, Y, t[n], params) + G[n]
        )
        rhs[:, -1] = psi_edge
        v = lu_x.solve(rhs.ravel())
        v[st.dflat] = psi_edge
        v = lu_y.solve(v)
        u[n] = v.reshape(grid.shape)
        _check_finite(u[n], n, "HJB solution")
    return SpaceTimeField(grid, time, u)


class FPOperator:
    """Linear Fokker-Planck propagator for a frozen value function.

    ``step(n, m)`` maps level ``n`` to ``n + 1``; :meth:`adjoint_step` applies
    the exact transpose of that map.
    """

    cfl = 0.9

    def __init__(self, u: SpaceTimeField, params: ModelParams, boundary: str = "absorbing"):
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
        check_pde_hypotheses(params, u.grid)
        self.grid, self.time = u.grid, u.time
        self.boundary = boundary
        st = _Stencils(self.grid, absorbing=boundary == "absorbing")
        self.dirichlet = st.dflat
        s1, s2 = params.sigma_sq_on(self.grid)
        dt = self.time.dt
        self.lu_x = st.implicit(st.Kx, 0.5 * s1, dt, conservative=True)
        self.lu_y = st.implicit(st.Ky, 0.5 * s2, dt, conservative=True)
        self.transport = [self._transport_matrix(u.values[n], params) for n in range(self.time.nt - 1)]
        rates = [max(float(-B.diagonal().min()), 0.0) for B in self.transport]
        self.substeps = [max(1, math.ceil(dt * r / self.cfl)) for r in rates]
        self.stability_bound = self.cfl / max(max(rates), 1e-300)

    def _transport_matrix(self, u: NDArray, params: ModelParams) -> sp.csr_matrix:
        """``B`` with ``dm/dt = B m`` for upwinded drift ``-(phi^2/a0) grad u``."""
        g = self.grid
        nx, ny = g.nx, g.ny
        idx = np.arange(g.size).reshape(g.shape)
        wx = np.full(nx, g.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(ny, g.hy)
        wy[[0, -1]] *= 0.5
        rows, cols, vals = [], [], []

        def add_faces(left, right, vel, w_left, w_right):
            pos = np.maximum(vel, 0.0)
            neg = np.minimum(vel, 0.0)
            # outflow from the left cell through a face with positive velocity
            rows.extend([left, right, left, right])
            cols.extend([left, left, right, right])
            vals.extend([-pos / w_left, pos / w_right, -neg / w_left, neg / w_right])

        xm = 0.5 * (g.x[:-1] + g.x[1:])
        Xm, Ym = np.meshgrid(xm, g.y)
        kx = phi1(Xm, Ym, params) ** 2 / params.a0
        vx = -kx * np.diff(u, axis=1) / g.hx
        add_faces(
            idx[:, :-1].ravel(), idx[:, 1:].ravel(), vx.ravel(),
            np.broadcast_to(wx[:-1], vx.shape).ravel(), np.broadcast_to(wx[1:], vx.shape).ravel(),
        )
        ym = 0.5 * (g.y[:-1] + g.y[1:])
        Xm, Ym = np.meshgrid(g.x, ym)
        ky = phi2(Xm, Ym, params) ** 2 / params.b0
        vy = -ky * np.diff(u, axis=0) / g.hy
        if self.boundary == "absorbing":
            vy[:, -1] = 0.0
        add_faces(
            idx[:-1, :].ravel(), idx[1:, :].ravel(), vy.ravel(),
            np.broadcast_to(wy[:-1, None], vy.shape).ravel(),
            np.broadcast_to(wy[1:, None], vy.shape).ravel(),
        )
        B = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(g.size, g.size),
        ).tocsr()
        if self.boundary == "absorbing":
            B = sp.diags((~self.dirichlet).astype(float)) @ B
        return B.tocsr()

    def step(self, n: int, m: NDArray) -> NDArray:
        B, k = self.transport[n], self.substeps[n]
        tau = self.time.dt / k
        v = m
        for _ in range(k):
            v = v + tau * (B @ v)
        v = v.copy()
        v[self.dirichlet] = 0.0
        v = self.lu_x.solve(v)
        v = self.lu_y.solve(v)
        v[self.dirichlet] = 0.0
        return v

    def adjoint_step(self, n: int, w: NDArray) -> NDArray:
        B, k = self.transport[n], self.substeps[n]
        tau = self.time.dt / k
        w = np.array(w, dtype=float)
        w[self.dirichlet] = 0.0
        v = self.lu_y.solve(w, trans="T")
        v = self.lu_x.solve(v, trans="T")
        v[self.dirichlet] = 0.0
        BT = B.T.tocsr()
        for _ in range(k):
            v = v + tau * (BT @ v)
        return v

    def propagate(self, m0: NDArray) -> NDArray:
        """All time levels, shape ``(nt, ny, nx)``."""
        out = np.empty((self.time.nt, self.grid.size))
        out[0] = m0.ravel()
        for n in range(self.time.nt - 1):
            out[n + 1] = self.step(n, out[n])
            _check_finite(out[n + 1], n + 1, "Fokker-Planck solution")
        return out.reshape(self.time.nt, *self.grid.shape)

    def terminal(self, m0: NDArray) -> NDArray:
        v = m0.ravel()
        for n in range(self.time.nt - 1):
            v = self.step(n, v)
        return v.reshape(self.grid.shape)

    def terminal_adjoint(self, w: NDArray) -> NDArray:
        v = w.ravel()
        for n in range(self.time.nt - 2, -1, -1):
            v = self.adjoint_step(n, v)
        return v.reshape(self.grid.shape)


def solve_fp_forward(
    m_0: ScalarField,
    u: SpaceTimeField,
    params: ModelParams,
    *,
    boundary: str = "absorbing",
) -> SpaceTimeField:
    """March the Fokker-Planck equation forward from ``m(., 0) = m_0``.

    ``boundary="neumann"`` replaces the absorbing face by a reflecting one
    (the mass-conserving test variant).
    """
    if np.min(m_0.values) < 0:
        raise ValueError("initial density must be nonnegative")
    op = FPOperator(u, params, boundary=boundary)
    m = op.propagate(m_0.values)
    scale = max(float(np.max(np.abs(m))), 1e-300)
    if np.min(m) < -1e-8 * scale:
        warnings.warn(
            f"Fokker-Planck positivity violated: min {np.min(m):.3e} (scale {scale:.3e})",
            SchemeWarning,
            stacklevel=2,
        )
    return SpaceTimeField(m_0.grid, u.time, m)


def _pure_diffusion(m_0: ScalarField, time: TimeGrid, params: ModelParams) -> SpaceTimeField:
    zero = SpaceTimeField(m_0.grid, time, np.zeros((time.nt, *m_0.grid.shape)))
    return solve_fp_forward(m_0, zero, params)


def solve_mfg(
    m_0: ScalarField,
    u_T: ScalarField,
    params: ModelParams,
    cfg: SolverConfig | None = None,
) -> MFGSolution:
    """Damped Picard iteration between the backward and forward solves."""
    cfg = cfg or SolverConfig()
    time = TimeGrid(params.T, cfg.nt)
    m_prev = _pure_diffusion(m_0, time, params)
    u_prev = None
    history: list[float] = []
    best: tuple[float, SpaceTimeField, SpaceTimeField] | None = None
    theta = cfg.damping
    for k in range(1, cfg.max_picard_iters + 1):
        u = solve_hjb_backward(u_T, m_prev, params)
        m_hat = solve_fp_forward(m_0, u, params)
        m_new = theta * m_hat.values + (1 - theta) * m_prev.values
        du = np.max(np.abs(u.values - u_prev.values)) if u_prev is not None else np.max(np.abs(u.values))
        res = float(np.max(np.abs(m_new - m_prev.values)) + du)
        history.append(res)
        m_prev = SpaceTimeField(m_0.grid, time, m_new)
        u_prev = u
        log.debug("picard iteration %d residual %.3e", k, res)
        if best is None or res < best[0]:
            best = (res, u, m_prev)
        if res < cfg.picard_tol:
            return MFGSolution(u, m_prev, k, history, True)
    _, u_best, m_best = best
    return MFGSolution(u_best, m_best, cfg.max_picard_iters, history, False)


def hjb_residual(u: SpaceTimeField, m: SpaceTimeField, params: ModelParams) -> NDArray:
    """Interior residual of the HJB equation at time midpoints.

    Centred differences in space, averaged over the two time levels; the
    result has shape ``(nt - 1, ny - 2, nx - 2)``.
    """
    g, time = u.grid, u.time
    s1, s2 = params.sigma_sq_on(g)
    kx, ky = control_gains(g, params)
    X, Y = g.mesh()
    G = coupling_array(np.maximum(m.values, 0.0), g, params)
    c = income(X[None], Y[None], time.t[:, None, None], params)
    U = u.values
    uxx = (U[:, 1:-1, 2:] - 2 * U[:, 1:-1, 1:-1] + U[:, 1:-1, :-2]) / g.hx**2
    uyy = (U[:, 2:, 1:-1] - 2 * U[:, 1:-1, 1:-1] + U[:, :-2, 1:-1]) / g.hy**2
    ux = (U[:, 1:-1, 2:] - U[:, 1:-1, :-2]) / (2 * g.hx)
    uy = (U[:, 2:, 1:-1] - U[:, :-2, 1:-1]) / (2 * g.hy)
    inner = (slice(None), slice(1, -1), slice(1, -1))
    spatial = (
        0.5 * s1[1:-1, 1:-1] * uxx
        + 0.5 * s2[1:-1, 1:-1] * uyy
        - 0.5 * kx[1:-1, 1:-1] * ux**2
        - 0.5 * ky[1:-1, 1:-1] * uy**2
        - c[inner]
        + G[inner]
    )
    ut = np.diff(U[inner], axis=0) / time.dt
    return ut + 0.5 * (spatial[1:] + spatial[:-1])


def fp_residual(m: SpaceTimeField, u: SpaceTimeField, params: ModelParams) -> NDArray:
    """Interior residual of the Fokker-Planck equation (drift ``-(phi^2/a0) grad u``)."""
    g, time = m.grid, m.time
    s1, s2 = params.sigma_sq_on(g)
    kx, ky = control_gains(g, params)
    M, U = m.values, u.values
    ux, uy = gradient_array(U, g)
    fx = -kx * ux * M
    fy = -ky * uy * M
    a = 0.5 * s1 * M
    b = 0.5 * s2 * M
    diff = (a[:, 1:-1, 2:] - 2 * a[:, 1:-1, 1:-1] + a[:, 1:-1, :-2]) / g.hx**2 + (
        b[:, 2:, 1:-1] - 2 * b[:, 1:-1, 1:-1] + b[:, :-2, 1:-1]
    ) / g.hy**2
    div = (fx[:, 1:-1, 2:] - fx[:, 1:-1, :-2]) / (2 * g.hx) + (fy[:, 2:, 1:-1] - fy[:, :-2, 1:-1]) / (2 * g.hy)
    spatial = diff - div
    mt = np.diff(M[:, 1:-1, 1:-1], axis=0) / time.dt
    return mt - 0.5 * (spatial[1:] + spatial[:-1])
