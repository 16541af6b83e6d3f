from __future__ import annotations

import math

import numpy as np
import pytest

from corrupt_mfg.grid import Grid, ScalarField, SpaceTimeField, h1_norm
from corrupt_mfg.model import ModelParams
from corrupt_mfg.retro import (
    NORM_NAMES,
    RetroConfig,
    add_noise,
    error_norms,
    fit_exponent,
    ground_truth,
    lambda_of_delta,
    make_snapshot,
    reconstruct,
    schedule_alpha,
    stability_experiment,
    stiffness_matrix,
    tikhonov_solve,
)
from corrupt_mfg.solvers import FPOperator

N, NT = 17, 32


@pytest.fixture(scope="module")
def truth():
    p = ModelParams()
    return p, ground_truth(p, Grid.square(N), NT)


def rel_err(a, b, grid):
    w = grid.weights()
    return float(np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * b**2)))


class TestNoise:
    @pytest.mark.parametrize("delta", [1e-1, 1e-4])
    def test_h1_norm_exact(self, delta):
        g = Grid.square(33)
        f = ScalarField(g, np.zeros(g.shape))
        for seed in range(5):
            noisy = add_noise(f, delta, seed)
            assert h1_norm(ScalarField(g, noisy.values - f.values)) == pytest.approx(delta, rel=1e-12)

    def test_zero_delta_and_determinism(self):
        g = Grid.square(9)
        f = ScalarField(g, np.ones(g.shape))
        assert np.array_equal(add_noise(f, 0.0, 1).values, f.values)
        assert np.array_equal(add_noise(f, 0.1, 1).values, add_noise(f, 0.1, 1).values)
        assert not np.array_equal(add_noise(f, 0.1, 1).values, add_noise(f, 0.1, 2).values)
        with pytest.raises(ValueError):
            add_noise(f, -1.0, 0)

    def test_snapshot_fields_independent(self):
        g = Grid.square(9)
        f = ScalarField(g, np.zeros(g.shape))
        snap = make_snapshot(f, f, 0.1, 0)
        assert not np.array_equal(snap.u_T_noisy.values, snap.m_T_noisy.values)


class TestSchedule:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_inverse(self, k):
        a = schedule_alpha(2.0, 2.0)
        assert a == pytest.approx(1 / 48)
        assert lambda_of_delta(math.exp(-k / a)) == pytest.approx(k, rel=1e-15)

    @pytest.mark.parametrize("delta", [0.0, 1e-3, 1.0])
    def test_rejects_inadmissible(self, delta):
        with pytest.raises(ValueError):
            lambda_of_delta(delta)


def test_config_validation():
    with pytest.raises(ValueError):
        RetroConfig(gamma=2.5)
    with pytest.raises(ValueError):
        RetroConfig(tikhonov_alpha=-1.0)
    assert RetroConfig().alpha_for(1e-2) == pytest.approx(1e-4)
    assert RetroConfig(tikhonov_alpha=1e-3).alpha_for(0.5) == 1e-3


def test_stiffness_matrix_gradient_energy():
    g = Grid.square(33)
    X, _ = g.mesh()
    S = stiffness_matrix(g)
    v = X.ravel()
    assert v @ S @ v == pytest.approx(1.0, rel=1e-12)
    assert np.allclose(S @ np.ones(g.size), 0.0)


class TestTikhonov:
    def test_adjoint_terminal(self, truth):
        p, (sol, _) = truth
        op = FPOperator(sol.u, p)
        rng = np.random.default_rng(3)
        for _ in range(3):
            v, w = rng.standard_normal((2, *sol.u.grid.shape))
            lhs = np.sum(w * op.terminal(v))
            rhs = np.sum(op.terminal_adjoint(w) * v)
            assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_zero_data(self, truth):
        p, (sol, _) = truth
        m0, info = tikhonov_solve(FPOperator(sol.u, p), np.zeros(sol.u.grid.shape), 1e-4)
        assert np.all(m0 == 0) and info.converged

    def test_larger_alpha_worse_fit(self, truth):
        p, (sol, m0_true) = truth
        op = FPOperator(sol.u, p)
        data = sol.m.values[-1]
        errs = []
        for alpha in (1e-2, 1e-4, 1e-6):
            m0, _ = tikhonov_solve(op, data, alpha)
            errs.append(rel_err(m0, m0_true.values, op.grid))
        assert errs[0] > errs[1] > errs[2]


class TestReconstruct:
    def test_self_consistency(self, truth):
        p, (sol, m0_true) = truth
        g = sol.u.grid
        rec = reconstruct(sol.u.at(NT - 1), sol.m.at(NT - 1), p, RetroConfig(tikhonov_alpha=1e-8), nt=NT)
        assert rec.cg_converged
        assert rel_err(rec.m0, m0_true.values, g) < 1e-2

    def test_independent_of_initial_guess(self, truth):
        p, (sol, _) = truth
        cfg = RetroConfig(tikhonov_alpha=1e-8)
        uT, mT = sol.u.at(NT - 1), sol.m.at(NT - 1)
        a = reconstruct(uT, mT, p, cfg, nt=NT)
        rng = np.random.default_rng(0)
        guess = SpaceTimeField(sol.m.grid, sol.m.time, sol.m.values * (1 + 0.5 * rng.random(sol.m.values.shape)))
        b = reconstruct(uT, mT, p, cfg, nt=NT, m_init=guess)

        def window_total(u, m):
            return sum(error_norms(u, m, cfg.gamma).values())

        def diff(x, y):
            return SpaceTimeField(x.grid, x.time, x.values - y.values)

        spread = window_total(diff(a.u, b.u), diff(a.m, b.m))
        err = window_total(diff(a.u, sol.u), diff(a.m, sol.m))
        assert spread <= 10 * err

    def test_regularisation_limit(self, truth):
        p, (sol, m0_true) = truth
        errs = []
        for alpha in (1e-2, 1e-4, 1e-6, 1e-8):
            rec = reconstruct(sol.u.at(NT - 1), sol.m.at(NT - 1), p, RetroConfig(tikhonov_alpha=alpha), nt=NT)
            errs.append(rel_err(rec.m0, m0_true.values, sol.u.grid))
        assert all(b < a for a, b in zip(errs, errs[1:]))


class TestNorms:
    def test_names_and_zero(self, truth):
        _, (sol, _) = truth
        z = SpaceTimeField(sol.u.grid, sol.u.time, np.zeros_like(sol.u.values))
        n = error_norms(z, z)
        assert tuple(n) == NORM_NAMES and all(v == 0 for v in n.values())

    def test_window_monotone(self, truth):
        _, (sol, _) = truth
        prev = None
        for gamma in (0.0, 1.25, 1.9):
            n = error_norms(sol.u, sol.m, gamma)
            if prev is not None:
                assert all(n[k] <= prev[k] + 1e-15 for k in NORM_NAMES)
            prev = n

    def test_quadratic_u(self):
        g = Grid.square(33)
        from corrupt_mfg.grid import TimeGrid

        time = TimeGrid(2.0, 33)
        X, Y = g.mesh()
        u = np.broadcast_to(0.5 * X**2, (33, *g.shape)).copy()
        z = SpaceTimeField(g, time, np.zeros_like(u))
        n = error_norms(SpaceTimeField(g, time, u), z)
        assert n["u_xx"] == pytest.approx(math.sqrt(2.0), rel=1e-12)
        assert n["u_t"] == 0 and n["u_xy"] == pytest.approx(0, abs=1e-12)


def test_fit_exponent():
    d = np.array([1e-1, 1e-2, 1e-3])
    assert fit_exponent(d, 3 * d**0.7) == pytest.approx(0.7)
    assert fit_exponent([1e-2], [1.0]) is None


def test_small_sweep(truth):
    p, t = truth
    res = stability_experiment(p, RetroConfig(), [1e-1, 1e-2], grid=Grid.square(N), nt=NT, truth=t)
    totals = [r.total for r in res.records]
    assert totals[1] <= totals[0]
    assert res.rho_emp is not None and res.rho_emp > 0
    for r in res.records:
        assert all(r.norms[k] <= r.norms_full[k] + 1e-15 for k in NORM_NAMES)
        assert r.lam is None
    with pytest.raises(ValueError):
        stability_experiment(p, RetroConfig(), [1e-2, 1e-1], grid=Grid.square(N), nt=NT, truth=t)
