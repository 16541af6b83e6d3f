"""Acceptance suite: one test per criterion, each reporting a pass/fail line."""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from corrupt_mfg.agents import AgentEnsemble, SimConfig, logistic_check, simulate
from corrupt_mfg.carleman import DiagonalOperator, ibp_identity, random_suite, scan_thresholds
from corrupt_mfg.grid import Grid, ScalarField, SpaceTimeField, h1_norm, integrate_space
from corrupt_mfg.model import ModelParams, bilinear
from corrupt_mfg.retro import (
    RetroConfig,
    ground_truth,
    lambda_of_delta,
    make_snapshot,
    reconstruct,
    schedule_alpha,
    stability_experiment,
)
from corrupt_mfg.solvers import FPOperator, SolverConfig, solve_fp_forward, solve_hjb_backward, solve_mfg

from conftest import bump, psi_field, time_grid

LAMBDAS = [1.0, 2.0, 5.0, 10.0]
SUITE = random_suite(20, seed=0)
L_DEFAULT = DiagonalOperator.constant(0.1)


def masses(m: SpaceTimeField) -> np.ndarray:
    return np.array([integrate_space(m.at(n)) for n in range(m.time.nt)])


def test_criterion_01_logistic(acceptance):
    start = time.perf_counter()
    out = logistic_check(dt=1e-4, beta=1.0, y0=0.5, t_long=20.0)
    elapsed = time.perf_counter() - start
    ok = out["error"] <= 1e-3 and out["y_long"] > 0.999 and elapsed < 1.0
    acceptance(1, ok, f"logistic y(1)={out['y1']:.6f} (exact 0.731059, err {out['error']:.1e}), "
                      f"y(20)={out['y_long']:.6f}, {elapsed:.2f}s")
    assert abs(out["y1_exact"] - 0.731059) < 1e-6
    assert ok


def test_criterion_02_carleman_divergence_backward(acceptance):
    start = time.perf_counter()
    table = scan_thresholds(SUITE, "5.1", LAMBDAS, [2.0, 3.0, 4.0], L=L_DEFAULT)
    elapsed = time.perf_counter() - start
    worst = min(min(r["min_margin_power"], r["min_margin_square"]) for r in table.rows)
    valid = all(r["valid"] for r in table.rows)
    ok = worst >= -1e-9 and valid and elapsed < 60
    acceptance(2, ok, f"backward weighted estimate: min normalised margin {worst:.3e} over "
                      f"{len(table.reports)} cells x 2 variants, quadrature stable={valid}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_carleman_forward(acceptance):
    start = time.perf_counter()
    s_list = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    table = scan_thresholds(SUITE, "5.2", LAMBDAS, s_list, L=L_DEFAULT)
    elapsed = time.perf_counter() - start
    s_hat = table.threshold
    above = [r for r in table.rows if s_hat is not None and r["s"] >= s_hat]
    nonneg = bool(above) and all(r["min_margin_power"] >= 0 for r in above)
    c_hat = min((r["min_empirical_C"] for r in above), default=None)
    ok = s_hat is not None and s_hat <= 8 and nonneg and c_hat is not None and c_hat > 0 and elapsed < 60
    acceptance(3, ok, f"forward weighted estimate: threshold s={s_hat}, min fitted constant "
                      f"{c_hat if c_hat is None else f'{c_hat:.3e}'}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_carleman_model_operator(acceptance):
    params = ModelParams(sigma1_sq=0.2, sigma2_sq=0.2)
    start = time.perf_counter()
    table = scan_thresholds(SUITE, "7.1", LAMBDAS, [2.0, 3.0, 4.0], params=params)
    elapsed = time.perf_counter() - start
    worst = min(min(r["min_margin_power"], r["min_margin_square"]) for r in table.rows)
    c_hat = min(r["min_empirical_C"] for r in table.rows)
    ok = worst >= 0 and c_hat > 0 and elapsed < 60
    acceptance(4, ok, f"model-operator estimate: min normalised margin {worst:.3e}, "
                      f"min second-derivative constant {c_hat:.3e}, {elapsed:.1f}s")
    assert ok


def test_criterion_05_integration_by_parts(acceptance):
    worst = 0.0
    for u in SUITE:
        lhs, rhs = ibp_identity(u, L_DEFAULT)
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    ok = worst <= 1e-3
    acceptance(5, ok, f"integration-by-parts identity: max relative mismatch {worst:.2e} over 20 functions")
    assert ok


def test_criterion_06_fp_mass(acceptance):
    params = ModelParams()
    grid = Grid.square(33)
    tg = time_grid(params, 64)
    start = time.perf_counter()
    zero = SpaceTimeField(grid, tg, np.zeros((tg.nt, *grid.shape)))
    u = solve_hjb_backward(psi_field(grid, params), zero, params)
    neumann = masses(solve_fp_forward(bump(grid, 0.5, 0.5, 0.15), u, params, boundary="neumann"))
    absorbing = masses(solve_fp_forward(bump(grid, 0.7, 0.5, 0.1), u, params))
    elapsed = time.perf_counter() - start
    drift = float(np.max(np.abs(neumann - neumann[0])))
    rise = float(np.max(np.diff(absorbing)))
    ok = drift <= 1e-6 and rise <= 1e-8 and elapsed < 30
    acceptance(6, ok, f"Fokker-Planck mass: Neumann drift {drift:.1e}, absorbing max step increase "
                      f"{rise:.1e} (mass {absorbing[0]:.3f} -> {absorbing[-1]:.3f}), {elapsed:.1f}s")
    assert ok


def test_criterion_07_hjb_monte_carlo(acceptance):
    params = ModelParams()
    grid = Grid.square(33)
    start = time.perf_counter()
    sol = solve_mfg(bump(grid, 0.5, 0.5, 0.15), psi_field(grid, params), params, SolverConfig(nt=64))
    ens = AgentEnsemble.at_point(10_000, 0.3, 0.5, seed=0)
    res = simulate(ens, sol.u, params, SimConfig(n_agents=10_000, dt_sim=1e-3, seed=0), m=sol.m)
    elapsed = time.perf_counter() - start
    u0 = float(bilinear(sol.u.values[0], grid, 0.3, 0.5))
    z = abs(res.mean_cost - u0) / res.stderr
    ok = sol.converged and z <= 3 and elapsed < 120
    acceptance(7, ok, f"HJB / Monte Carlo: mean cost {res.mean_cost:.5f} +- {res.stderr:.5f} vs "
                      f"u(0.3,0.5,0)={u0:.5f} ({z:.2f} SE), {elapsed:.1f}s")
    assert ok


def test_criterion_08_picard(acceptance):
    params = ModelParams(g_a1=1e-2, g_b1=1e-2)
    grid = Grid.square(33)
    cfg = SolverConfig(nt=64, max_picard_iters=30, picard_tol=1e-6)
    sol = solve_mfg(bump(grid, 0.5, 0.5, 0.15), psi_field(grid, params), params, cfg)
    r = np.array(sol.residual_history)
    ratios = r[2:] / r[1:-1]
    worst = float(ratios.max()) if ratios.size else math.nan
    ok = sol.converged and r[-1] < 1e-6 and len(r) <= 30 and bool(np.all(ratios < 0.9))
    acceptance(8, ok, f"Picard iteration: {len(r)} iterations, final residual {r[-1]:.1e}, "
                      f"max ratio after iteration 2 {worst:.3f}")
    assert ok


def test_criterion_09_adjoint(acceptance):
    params = ModelParams()
    grid = Grid.square(33)
    tg = time_grid(params, 64)
    zero = SpaceTimeField(grid, tg, np.zeros((tg.nt, *grid.shape)))
    u = solve_hjb_backward(psi_field(grid, params), zero, params)
    op = FPOperator(u, params)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(10):
        n = int(rng.integers(tg.nt - 1))
        v, w = rng.standard_normal((2, grid.size))
        lhs = float(w @ op.step(n, v))
        rhs = float(op.adjoint_step(n, w) @ v)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    ok = worst <= 1e-10
    acceptance(9, ok, f"adjoint dot-product test: max relative mismatch {worst:.1e} over 10 pairs")
    assert ok


def test_criterion_10_retrospective_stability(acceptance):
    params = ModelParams()
    grid = Grid.square(33)
    start = time.perf_counter()
    truth = ground_truth(params, grid, 64)
    sol_true, m0_true = truth
    deltas = [1e-1, 1e-2, 1e-3, 1e-4]
    result = stability_experiment(params, RetroConfig(gamma=1.25, T=2.0), deltas, grid=grid, nt=64, truth=truth)
    totals = [r.total for r in result.records]
    monotone = all(b <= 2 * a for a, b in zip(totals, totals[1:]))
    rho = result.rho_emp
    rec = reconstruct(sol_true.u.at(63), sol_true.m.at(63), params, RetroConfig(tikhonov_alpha=1e-8), nt=64)
    w = grid.weights()
    m0_err = float(np.sqrt(np.sum(w * (rec.m0 - m0_true.values) ** 2) / np.sum(w * m0_true.values**2)))
    elapsed = time.perf_counter() - start
    ok = monotone and rho is not None and rho > 0 and m0_err <= 1e-2 and elapsed < 900
    acceptance(10, ok, "retrospective stability: totals "
                       + ", ".join(f"{t:.2e}" for t in totals)
                       + f", rho_emp={rho if rho is None else f'{rho:.3f}'}, "
                       f"noise-free m0 error {m0_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_11_noise_calibration(acceptance):
    params = ModelParams()
    grid = Grid.square(33)
    X, Y = grid.mesh()
    uT = psi_field(grid, params)
    mT = ScalarField(grid, np.cos(np.pi * X / 2) * (1 + 0.3 * np.cos(np.pi * Y)))
    worst = 0.0
    for seed in range(20):
        for delta in (1e-1, 1e-3):
            snap = make_snapshot(uT, mT, delta, seed)
            for noisy, true in ((snap.u_T_noisy, uT), (snap.m_T_noisy, mT)):
                norm = h1_norm(ScalarField(grid, noisy.values - true.values))
                worst = max(worst, abs(norm - delta) / delta)
    ok = worst <= 1e-12
    acceptance(11, ok, f"noise calibration: max relative H1 deviation {worst:.1e} over 20 seeds")
    assert ok


def test_criterion_12_lambda_schedule(acceptance):
    alpha = schedule_alpha(2.0, 2.0)
    got = [lambda_of_delta(math.exp(-k / alpha), T=2.0, s1_hat=2.0) for k in (1, 2, 3)]
    ok = got == [1.0, 2.0, 3.0]
    acceptance(12, ok, f"lambda schedule: lambda(exp(-k/alpha)) = {got} for k = 1, 2, 3")
    assert ok
