import dataclasses

import numpy as np
import pytest
from oracles import three_agent_paths
from scenarios import random_params, random_scenario

from snc_mfg.errors import NumericalError
from snc_mfg.meanfield import CLASSES, class_coefficients, solve_equilibrium
from snc_mfg.model import InitialLaw, ModelParams, ScenarioConfig, example51_params, example51_scenario
from snc_mfg.riccati import TimeGrid
from snc_mfg.simulate import (CCPathResult, convexity_probe, sample_brownian, simulate_population,
                              simulate_stacked_cc, stationarity_residuals)


@pytest.fixture(scope="module")
def example_eq():
    return solve_equilibrium(example51_scenario(grid_steps=100))


class TestBrownian:
    def test_same_query_same_value(self):
        b = sample_brownian(TimeGrid(1.0, 10), 3, 5)
        assert b.increment(("minor", 7), 4, 2) == b.increment(("minor", 7), 4, 2)

    def test_agent_noise_does_not_depend_on_population_size(self):
        b = sample_brownian(TimeGrid(1.0, 10), 2, 9)
        small = b.step_block("follower", 3, 10)
        large = b.step_block("follower", 3, 1000)
        assert np.array_equal(small, large[:, :10])
        assert b.increment(("follower", 4), 3, 1) == large[1, 4]

    def test_increment_moments(self):
        grid = TimeGrid(1.0, 100)
        x = sample_brownian(grid, 1, 123).increments("minor", 0, 10**6)
        assert abs(x.mean()) <= 4 * np.sqrt(grid.dt) / 1e3
        assert abs(x.var() / grid.dt - 1) <= 0.01

    def test_distinct_sources_are_uncorrelated(self):
        b = sample_brownian(TimeGrid(1.0, 100), 1, 77)
        x = b.increments("minor", 5, 10**6)
        y = b.increments("follower", 5, 10**6)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.005

    def test_seeds_differ(self):
        g = TimeGrid(1.0, 10)
        assert not np.array_equal(sample_brownian(g, 1, 1).increments("major", 0, 5),
                                  sample_brownian(g, 1, 2).increments("major", 0, 5))


class TestStackedPaths:
    def test_example_controls_vanish_and_states_freeze(self, example_eq):
        eq = example_eq
        path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 200, 4),
                                   eq.initial, eq.gains, eq.params)
        for u in path.controls.values():
            assert not np.any(u)
        assert np.all(path.X == path.X[0])
        assert path.diagnostics["terminal_gap"] <= 1e-15
        assert max(path.diagnostics["stationarity"].values()) == 0.0

    def test_noise_free_zero_start_stays_at_rest(self):
        eq = solve_equilibrium(random_scenario(3, grid_steps=50, mean_xi0=np.zeros(1)))
        zero_law = InitialLaw(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf,
                                   sample_brownian(eq.riccati.grid, 5, 0, scale=0.0), zero_law, eq.gains)
        assert not np.any(path.X) and not np.any(path.Y) and not np.any(path.Z)

    def test_backward_residual_refines(self):
        # source-diagonal coupling keeps Z o dW an exact representation
        out = []
        for K in (1000, 2000):
            cfg = random_scenario(7, grid_steps=K, sourcewise=True)
            eq = solve_equilibrium(cfg)
            path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 500, 1),
                                       cfg.initial, eq.gains)
            out.append(path.diagnostics["bsde_residual"])
        assert out[0] / out[1] >= 1.8

    def test_terminal_ansatz_and_stationarity(self):
        cfg = random_scenario(2, n=2, grid_steps=100)
        eq = solve_equilibrium(cfg)
        path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 100, 2),
                                   cfg.initial, eq.gains, eq.params)
        assert path.diagnostics["terminal_gap"] <= 1e-12
        assert max(path.diagnostics["stationarity"].values()) <= 1e-12

    def test_stationarity_responds_to_perturbation(self):
        cfg = random_scenario(4, grid_steps=40)
        eq = solve_equilibrium(cfg)
        path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 10, 2),
                                   cfg.initial, eq.gains, eq.params)
        eps = 1e-3
        for cls in CLASSES:
            controls = dict(path.controls)
            controls[cls] = controls[cls] + eps
            moved = dataclasses.replace(path, controls=controls)
            R = class_coefficients(eq.params, cls)[2]
            got = stationarity_residuals(moved, eq.params)[cls]
            assert got == pytest.approx(np.max(np.abs(R @ np.full(R.shape[0], eps))), rel=1e-6)

    def test_non_finite_state_raises(self):
        eq = solve_equilibrium(random_scenario(1, grid_steps=10))
        blocks = dataclasses.replace(eq.blocks, A_blk=eq.blocks.A_blk * 1e308)
        with pytest.raises(NumericalError), np.errstate(all="ignore"):
            simulate_stacked_cc(blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 2, 0),
                                eq.initial, eq.gains)

    def test_result_type(self, example_eq):
        eq = example_eq
        path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, sample_brownian(eq.riccati.grid, 3, 0))
        assert isinstance(path, CCPathResult)
        assert path.X.shape == (101, 3, 4)


class TestPopulation:
    def test_example_minor_costs_from_initial_spread(self, example_eq):
        eq = example_eq
        bundle = sample_brownian(eq.riccati.grid, 4, 11)
        res = simulate_population(eq.params, eq.gains, eq.mf, 25, 5, bundle, eq.initial)
        xi = bundle.initial_normals("minor", 25, 1)[..., 0]
        want = 0.5 * (xi - xi.mean(axis=1, keepdims=True)) ** 2
        np.testing.assert_allclose(res.costs["Jl"], want, rtol=1e-12, atol=1e-15)

    def test_identical_initials_give_zero_cost(self, example_eq):
        eq = example_eq
        law = InitialLaw(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        res = simulate_population(eq.params, eq.gains, eq.mf, 10, 10, sample_brownian(eq.riccati.grid, 3, 0), law)
        assert not np.any(res.costs["Jl"]) and not np.any(res.costs["Jf"])

    def test_single_agents_match_hand_coded_simulator(self):
        cfg = random_scenario(3, grid_steps=50)
        eq = solve_equilibrium(cfg)
        bundle = sample_brownian(eq.riccati.grid, 10, 7)
        res = simulate_population(eq.params, eq.gains, eq.mf, 1, 1, bundle, eq.initial)
        for r in range(10):
            ref = three_agent_paths(eq.params, eq.gains, eq.mf, bundle, eq.initial, r)
            assert np.array_equal(ref[:, 1], res.empirical_mX[:, r, 0])
            assert np.array_equal(ref[:, 2], res.empirical_mx[:, r, 0])

    def test_average_error_scales_like_inverse_population(self):
        cfg = random_scenario(7, grid_steps=50, sourcewise=True)
        eq = solve_equilibrium(cfg)
        bundle = sample_brownian(eq.riccati.grid, 200, 3)
        est = [simulate_population(eq.params, eq.gains, eq.mf, N, N, bundle, eq.initial).sup_mX_err.mean()
               for N in (10, 40, 160)]
        for a, b in zip(est, est[1:]):
            assert 2.5 <= a / b <= 6

    def test_same_config_is_bit_identical(self):
        cfg = random_scenario(6, grid_steps=30)
        runs = []
        for _ in range(2):
            eq = solve_equilibrium(cfg)
            runs.append(simulate_population(eq.params, eq.gains, eq.mf, 20, 30,
                                            sample_brownian(eq.riccati.grid, 5, cfg.seed), eq.initial))
        a, b = runs
        assert np.array_equal(a.empirical_mX, b.empirical_mX)
        for key in ("J0", "Jl", "Jf"):
            assert np.array_equal(a.costs[key], b.costs[key])
            assert np.array_equal(a.limit_costs[key], b.limit_costs[key])
        assert a.summary() == b.summary()

    def test_summary_shape(self, example_eq):
        eq = example_eq
        res = simulate_population(eq.params, eq.gains, eq.mf, 10, 10, sample_brownian(eq.riccati.grid, 3, 0),
                                  eq.initial)
        s = res.summary()
        assert set(s["gaps"]) == {"sup_mX_err", "sup_mx_err", "cost_gap_J0", "cost_gap_Jl", "cost_gap_Jf"}


class TestConvexity:
    @pytest.mark.parametrize("cls", CLASSES)
    def test_psd_weights_give_nonnegative_values(self, cls):
        for params in (example51_params(), random_params(3)):
            assert min(convexity_probe(params, cls, 50, seed=1, grid_steps=50)) >= -1e-10

    def test_indefinite_follower_weight_is_detected(self):
        one = np.ones((1, 1))
        p = ModelParams.zeros(1).replace(B_tilde=one, Q_tilde=-one, R_tilde=1e-3 * one)
        assert min(convexity_probe(p, "follower", 100, seed=0, grid_steps=50)) < 0

    def test_zero_control_gives_zero(self):
        from snc_mfg.simulate import _moment_functional

        p = random_params(2)
        zero = np.zeros((51, 1))
        assert _moment_functional(p.A, p.B, p.C, p.D, p.Q, p.R, p.Hw, zero, 0.02) == 0.0

    def test_mean_response_to_zero_control_is_zero(self):
        from snc_mfg.simulate import follower_mean_response

        grid = TimeGrid(1.0, 40)
        X0, mx = follower_mean_response(random_params(5), grid, np.zeros((41, 1)))
        assert np.max(np.abs(X0)) == 0.0 and np.max(np.abs(mx)) < 1e-14

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            convexity_probe(example51_params(), "bystander", 1, 0)


def test_scenario_defaults_round_trip():
    cfg = ScenarioConfig(example51_params(), InitialLaw.standard(1))
    assert cfg.populations == ((10, 10), (100, 100), (1000, 1000))
