from __future__ import annotations

import numpy as np
import pytest

from corrupt_mfg.agents import (
    AgentEnsemble,
    SimConfig,
    empirical_density,
    logistic_check,
    simulate,
    step_sde,
)
from corrupt_mfg.grid import Grid, ScalarField, SpaceTimeField, integrate_space
from corrupt_mfg.model import ModelParams
from corrupt_mfg.solvers import solve_fp_forward, solve_hjb_backward

from conftest import bump, psi_field, time_grid

pytestmark = pytest.mark.filterwarnings("ignore::corrupt_mfg.solvers.SchemeWarning")


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_agents=0)
    with pytest.raises(ValueError):
        SimConfig(control_mode="greedy")


def test_positions_validated():
    with pytest.raises(ValueError):
        AgentEnsemble.from_positions([[1.2, 0.5]])


def test_no_drift_no_noise_is_stationary():
    p = ModelParams(sigma1_sq=0.0, sigma2_sq=0.0)
    ens = AgentEnsemble.from_positions(np.random.default_rng(0).random((50, 2)) * 0.99)
    before = ens.positions.copy()
    for _ in range(10):
        step_sde(ens, (np.zeros(50), np.zeros(50)), p, 1e-2)
    assert np.array_equal(ens.positions, before)


class TestLogistic:
    def test_matches_closed_form(self):
        out = logistic_check()
        assert out["error"] < 1e-3
        assert out["y_long"] > 0.999

    def test_first_order(self):
        e1 = logistic_check(dt=2e-3, t_long=1.0)["error"]
        e2 = logistic_check(dt=1e-3, t_long=1.0)["error"]
        assert 1.8 < e1 / e2 < 2.2


@pytest.fixture(scope="module")
def setup():
    p = ModelParams()
    g = Grid.square(17)
    time = time_grid(p, 32)
    zero = SpaceTimeField(g, time, np.zeros((time.nt, *g.shape)))
    u = solve_hjb_backward(psi_field(g, p), zero, p)
    return p, g, u


class TestSimulation:
    def test_stays_in_box(self, setup):
        p, g, u = setup
        res = simulate(AgentEnsemble.at_point(500, 0.9, 0.95), u, p, SimConfig(n_agents=500, dt_sim=1e-2))
        assert np.all(res.positions >= 0) and np.all(res.positions <= 1)
        dead = ~res.ensemble.alive
        assert np.all(res.ensemble.positions[dead, 0] == 1.0)

    def test_seed_reproducible(self, setup):
        p, g, u = setup
        cfg = SimConfig(n_agents=200, dt_sim=1e-2)
        a = simulate(AgentEnsemble.at_point(200, 0.3, 0.5, seed=4), u, p, cfg)
        b = simulate(AgentEnsemble.at_point(200, 0.3, 0.5, seed=4), u, p, cfg)
        c = simulate(AgentEnsemble.at_point(200, 0.3, 0.5, seed=5), u, p, cfg)
        assert np.array_equal(a.positions, b.positions) and a.mean_cost == b.mean_cost
        assert not np.array_equal(a.positions, c.positions)

    def test_absorption_grows_with_volatility(self, setup):
        _, g, _ = setup
        frac = []
        for s in (0.05, 0.2, 0.8):
            p = ModelParams(sigma1_sq=s)
            cfg = SimConfig(n_agents=2000, dt_sim=1e-2, control_mode="zero")
            res = simulate(AgentEnsemble.at_point(2000, 0.7, 0.5), None, p, cfg)
            frac.append(1 - res.alive_fraction[-1])
        assert frac[0] < frac[1] < frac[2]

    def test_zero_cost(self):
        p = ModelParams(income=0.0, psi=0.0, g_a1=0.0, g_b1=0.0)
        cfg = SimConfig(n_agents=100, dt_sim=1e-2, control_mode="zero")
        res = simulate(AgentEnsemble.at_point(100, 0.5, 0.5), None, p, cfg)
        assert res.mean_cost == 0.0 and np.all(res.ensemble.accumulated_cost == 0.0)

    def test_feedback_needs_u(self):
        with pytest.raises(ValueError):
            simulate(AgentEnsemble.at_point(5, 0.5, 0.5), None, ModelParams(), SimConfig())

    def test_alive_fraction_tracks_fp_mass(self, setup):
        p, g, u = setup
        m0 = bump(g, 0.7, 0.5, 0.1)
        m = solve_fp_forward(m0, u, p)
        ens = AgentEnsemble.sample_density(4000, m0.values, g, seed=1)
        res = simulate(ens, u, p, SimConfig(n_agents=4000, dt_sim=2e-3))
        mass = np.array([integrate_space(m.at(n)) for n in range(m.time.nt)])
        assert np.max(np.abs(res.alive_fraction - mass)) < 0.05


class TestKDE:
    def test_normalised_to_alive_fraction(self):
        g = Grid.square(33)
        time = time_grid(ModelParams(), 2)
        rng = np.random.default_rng(0)
        pos = rng.random((2, 400, 2))
        alive = np.ones((2, 400), bool)
        alive[1, :100] = False
        kde = empirical_density(pos, alive, g, time)
        assert integrate_space(kde.at(0)) == pytest.approx(1.0, abs=1e-12)
        assert integrate_space(kde.at(1)) == pytest.approx(0.75, abs=1e-12)

    def test_no_alive_agents(self):
        g = Grid.square(9)
        time = time_grid(ModelParams(), 2)
        kde = empirical_density(np.zeros((2, 3, 2)), np.zeros((2, 3), bool), g, time)
        assert np.all(kde.values == 0)

    def test_converges_with_sample_size(self):
        g = Grid.square(33)
        X, Y = g.mesh()
        dens = 1 + 0.5 * np.cos(np.pi * X) * np.cos(np.pi * Y)
        dens /= integrate_space(ScalarField(g, dens))
        time = time_grid(ModelParams(), 2)
        err = []
        for n in (1000, 10_000):
            ens = AgentEnsemble.sample_density(n, dens, g, seed=2)
            pos = np.broadcast_to(ens.positions, (2, n, 2))
            kde = empirical_density(pos, np.ones((2, n), bool), g, time)
            err.append(integrate_space(ScalarField(g, np.abs(kde.values[0] - dens))))
        assert err[1] < err[0]
