#!/usr/bin/env python3
"""
Tests for stopping: penalized solves, eps-continuation and the post-exit map.
"""

import numpy as np
import pytest

from grid_solver import GridField, build_grid, solve_stationary, solve_td
from model_core import ConfigError, ModelSpec
from monotone_verify import verify_stopping
from stopping import (
    StoppingConfig,
    continuation_limit,
    default_schedule,
    exit_set,
    post_exit_state,
    solve_penalized_stationary,
    solve_penalized_td,
)


def zero(x, p):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))


def constant(value):
    return lambda x, p: np.full(np.broadcast_shapes(np.shape(x), np.shape(p)), float(value))


def shifted_identity(x, p):
    return np.asarray(x, dtype=float) - 1.0 + 0.0 * np.asarray(p)


@pytest.fixture
def shifted_model():
    """d=1, F=0, G=x-1, r=1; the stopping limit is min(x-1, 0)."""
    return ModelSpec(d=1, F=zero, G=shifted_identity, r=1.0, name="x-1")


class TestStoppingConfig:
    def test_schedule_must_decrease(self):
        with pytest.raises(ConfigError):
            StoppingConfig([0.1, 0.1])

    def test_beta_prime_range(self):
        with pytest.raises(ConfigError):
            StoppingConfig([0.1, 0.05], beta_prime_at_zero=1.5)

    def test_default_schedule_halves(self):
        schedule = default_schedule()
        assert all(b == pytest.approx(a / 2) for a, b in zip(schedule, schedule[1:]))


class TestPenalizedStationary:
    def test_inactive_penalty(self):
        spec = ModelSpec(d=1, F=zero, G=constant(-2.0), r=1.0)
        field_ = solve_penalized_stationary(spec, build_grid(1, 1.0, 0.125), 0.1)
        np.testing.assert_allclose(field_.slice(), -2.0, atol=1e-7)

    @pytest.mark.parametrize("eps", [0.1, 0.05, 0.025])
    def test_positive_drift_balance(self, eps):
        spec = ModelSpec(d=1, F=zero, G=constant(1.0), r=1.0)
        field_ = solve_penalized_stationary(spec, build_grid(1, 1.0, 1.0 / 16), eps)
        expected = eps / (1.0 + eps)
        assert float(field_.slice().max()) == pytest.approx(expected, rel=0.1)
        assert 0.0 < float(field_.slice().min()) <= eps

    def test_halving_eps_halves_the_value(self):
        spec = ModelSpec(d=1, F=zero, G=constant(1.0), r=1.0)
        grid = build_grid(1, 1.0, 0.25)
        coarse = solve_penalized_stationary(spec, grid, 0.02).slice().max()
        fine = solve_penalized_stationary(spec, grid, 0.01).slice().max()
        assert fine / coarse == pytest.approx(0.5, rel=0.02)


class TestPenalizedTd:
    def test_inactive_penalty_matches_plain_march(self):
        spec = ModelSpec(d=1, F=zero, G=constant(-1.0), U0=lambda x: -np.asarray(x, dtype=float))
        grid = build_grid(1, 1.0, 0.25)
        plain = solve_td(spec, grid, 1.0, 0.05)
        penalized = solve_penalized_td(spec, grid, 0.01, 1.0, 0.05)
        np.testing.assert_array_equal(plain.values, penalized.values)

    def test_plateau_at_eps_scale(self):
        g, eps = 1.0, 0.05
        spec = ModelSpec(d=1, F=zero, G=constant(g), U0=lambda x: np.zeros(np.shape(x)))
        field_ = solve_penalized_td(spec, build_grid(1, 1.0, 0.25), eps, 1.0, 0.005)
        assert float(field_.slice().max()) <= 1.01 * g * eps

    def test_step_halving_changes_little(self):
        spec = ModelSpec(d=1, F=zero, G=constant(1.0), U0=lambda x: np.zeros(np.shape(x)))
        grid = build_grid(1, 1.0, 0.25)
        a = solve_penalized_td(spec, grid, 0.05, 0.5, 0.01).slice()
        b = solve_penalized_td(spec, grid, 0.05, 0.5, 0.005).slice()
        assert float(np.max(np.abs(a - b))) <= 0.01


class TestContinuation:
    def test_slack_constraint_matches_plain_solve(self):
        spec = ModelSpec(d=1, F=zero, G=lambda x, p: -1.0 - np.asarray(x) + 0.0 * np.asarray(p), r=1.0)
        grid = build_grid(1, 1.0, 0.125)
        limit = continuation_limit(spec, grid, StoppingConfig([0.5, 0.25, 0.125]))
        plain = solve_stationary(spec, grid)
        np.testing.assert_allclose(limit.slice(), plain.slice(), atol=1e-7)

    def test_positive_part_is_linear_in_eps(self):
        spec = ModelSpec(d=1, F=zero, G=constant(1.0), r=1.0)
        schedule = [0.08, 0.04, 0.02, 0.01]
        limit = continuation_limit(spec, build_grid(1, 1.0, 0.25), StoppingConfig(schedule))
        for cert in limit.meta["certificates"]:
            assert 0.9 <= cert["max_positive_part"] / cert["eps"] <= 1.1
        assert limit.meta["warnings"] == []

    @pytest.mark.slow
    def test_shifted_identity_limit(self, shifted_model):
        h = 1.0 / 64
        schedule = [1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256]
        grid = build_grid(1, 2.0, h)
        limit = continuation_limit(shifted_model, grid, StoppingConfig(schedule))
        exact = np.minimum(grid.coords - 1.0, 0.0)
        eps_last = schedule[-1]
        assert float(np.max(np.abs(limit.slice() - exact))) <= 3 * (h + eps_last)

        grads = [c["grad_norm"] for c in limit.meta["certificates"]]
        assert max(grads) < 1.25 * min(grads)

        report = verify_stopping(limit, shifted_model, n_samples=500, tol=5 * (h + eps_last), seed=17, workers=2)
        assert report.passed, report.worst_witness

        assert exit_set(limit, [2.0], tol=5 * (h + eps_last)) == [0]


class TestExitSet:
    def _field(self, values):
        grid = build_grid(2, 1.0, 0.5)
        return GridField(grid, np.array([0.0]), np.broadcast_to(values, (grid.size, 2)).copy())

    def test_strictly_negative_values(self):
        assert exit_set(self._field([-1.0, -0.5]), [0.25, 0.25]) == []

    def test_contact_component(self):
        assert exit_set(self._field([0.0, -0.5]), [0.25, 0.25], tol=1e-6) == [0]


class TestPostExit:
    def test_no_exit_returns_x(self, shifted_model):
        grid = build_grid(1, 2.0, 0.25)
        field_ = GridField(grid, np.array([0.0]), -np.ones((grid.size, 1)))
        state = post_exit_state(shifted_model, field_, [1.5])
        assert state.exit_set == []
        np.testing.assert_array_equal(state.x_tilde, [1.5])

    def test_exit_from_empty_state_keeps_x(self):
        spec = ModelSpec(d=2, F=zero, G=constant(1.0), r=1.0)
        grid = build_grid(2, 1.0, 0.25)
        values = np.column_stack([np.zeros(grid.size), -np.ones(grid.size)])
        field_ = GridField(grid, np.array([0.0]), values)
        state = post_exit_state(spec, field_, [0.0, 0.5])
        assert state.exit_set == [0]
        np.testing.assert_allclose(state.x_tilde, [0.0, 0.5], atol=1e-8)
        assert state.pure_coincides

    def test_matches_brute_force_scan(self, shifted_model):
        # U = min(x - 1, 0) with G = x - 1: the only admissible exit point is x~ = 1
        grid = build_grid(1, 2.0, 1.0 / 64)
        values = np.minimum(grid.coords - 1.0, 0.0)
        field_ = GridField(grid, np.array([0.0]), values)
        x = np.array([1.5])
        state = post_exit_state(shifted_model, field_, x, exit_tol=1e-6)
        assert state.exit_set == [0]

        scan = np.linspace(0.0, 1.5, 10_000)[:, None]
        U = field_.interpolate(scan)
        target = field_.interpolate(x[None])[0]
        residual = np.maximum(np.abs(U - target)[:, 0], np.abs((scan[:, 0] - 1.0) * scan[:, 0]))
        best = scan[int(np.argmin(residual)), 0]
        assert state.x_tilde[0] == pytest.approx(best, abs=1e-3)
        assert state.residual <= 1e-8
        assert not state.pure_coincides
