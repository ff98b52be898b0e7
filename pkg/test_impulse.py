#!/usr/bin/env python3
"""
Tests for impulse: jump operator, acyclicity check, envelopes, alpha selection
and the penalized impulse solve.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import field_from, identity_model
from grid_solver import build_grid, solve_stationary
from impulse import (
    ImpulseScheme,
    alpha_from_value,
    alpha_target,
    alpha_to_frame,
    as_cost_matrix,
    check_hyp7,
    jump_operator,
    m_envelope,
    solve_penalized_impulse,
)
from model_core import ChatteringError, ConfigError, HypothesisError, ImpulseError, ModelSpec
from monotone_verify import verify_impulse

INF = np.inf


def zero(x, p):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))


@pytest.fixture
def two_state():
    """F = 0, G = (5, 1), r = 1, a single jump 1 -> 2 at cost 1; the limit is U = (2, 1)."""
    spec = ModelSpec(
        d=2, F=zero,
        G=lambda x, p: np.broadcast_to([5.0, 1.0], np.broadcast_shapes(np.shape(x), np.shape(p))),
        r=1.0, name="two-state-impulse",
    )
    k = np.array([[INF, 1.0], [INF, INF]])
    return spec, k


def has_cycle(k):
    adjacency = (np.isfinite(k) & ~np.eye(len(k), dtype=bool)).astype(int)
    reach = np.zeros_like(adjacency)
    power = np.eye(len(k), dtype=int)
    for _ in range(len(k)):
        power = power @ adjacency
        reach += power
    return bool(np.trace(reach) > 0)


class TestJumpOperator:
    def test_two_states(self):
        k = np.array([[INF, 1.0], [3.0, INF]])
        np.testing.assert_array_equal(jump_operator(k, [5.0, 0.0]), [1.0, 8.0])

    def test_forbidden_jumps(self):
        k = np.full((2, 2), INF)
        assert np.all(np.isinf(jump_operator(k, [1.0, 2.0])))

    def test_minimum_over_targets(self):
        k = np.array([[INF, 1.0, 2.0], [INF, INF, INF], [INF, INF, INF]])
        assert jump_operator(k, [0.0, 4.0, 1.0])[0] == 3.0

    def test_diagonal_is_ignored(self):
        k = np.array([[0.0, 4.0], [INF, 0.0]])
        np.testing.assert_array_equal(jump_operator(k, [1.0, 1.0]), [5.0, INF])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.floats(min_value=-3.0, max_value=3.0))
    def test_monotone_and_shift_equivariant(self, seed, c):
        rng = np.random.default_rng(seed)
        k = np.where(rng.random((3, 3)) < 0.5, rng.uniform(0.1, 2.0, (3, 3)), INF)
        p = rng.normal(size=3)
        q = p + rng.random(3)
        Mp, Mq = jump_operator(k, p), jump_operator(k, q)
        assert np.all(Mp <= Mq)
        np.testing.assert_allclose(jump_operator(k, p + c), Mp + c)


class TestCostMatrix:
    def test_parses_infinity_spellings(self):
        k = as_cost_matrix([[None, "inf"], [1, 0]])
        assert np.isinf(k[0, 1]) and k[1, 0] == 1.0
        assert np.all(np.isinf(np.diag(k)))

    def test_shape_is_checked(self):
        with pytest.raises(ConfigError):
            as_cost_matrix([[1.0, 2.0]], d=2)


class TestHyp7:
    def test_acyclic_pair(self):
        assert check_hyp7(np.array([[INF, 1.0], [INF, INF]])).passed

    def test_two_cycle(self):
        report = check_hyp7(np.array([[INF, 1.0], [1.0, INF]]))
        assert not report.passed
        assert report.witness["clause"] == "cycle"
        assert report.witness["cycle"] in ([0, 1, 0], [1, 0, 1])

    def test_zero_cost(self):
        report = check_hyp7(np.array([[INF, 0.0], [INF, INF]]))
        assert report.witness["clause"] == "positivity"

    def test_all_three_state_patterns(self):
        off_diagonal = [(i, j) for i in range(3) for j in range(3) if i != j]
        for pattern in itertools.product([1.0, INF], repeat=len(off_diagonal)):
            k = np.full((3, 3), INF)
            for (i, j), cost in zip(off_diagonal, pattern):
                k[i, j] = cost
            assert check_hyp7(k).passed == (not has_cycle(k)), pattern


class TestEnvelope:
    def test_fixed_point(self):
        k = np.array([[INF, 1.0], [INF, INF]])
        np.testing.assert_array_equal(m_envelope(k, [0.5, 0.0]), [0.5, 0.0])

    def test_one_sweep(self):
        k = np.array([[INF, 1.0], [INF, INF]])
        np.testing.assert_array_equal(m_envelope(k, [5.0, 0.0]), [1.0, 0.0])

    def test_chain_composes_path_costs(self):
        k = np.array([[INF, 1.0, INF], [INF, INF, 1.0], [INF, INF, INF]])
        np.testing.assert_array_equal(m_envelope(k, [9.0, 9.0, 0.0]), [2.0, 1.0, 0.0])

    def test_non_positive_cycle_is_detected(self):
        k = np.array([[INF, -1.0], [-1.0, INF]])
        with pytest.raises(ImpulseError):
            m_envelope(k, [0.0, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_largest_feasible_point_on_a_lattice(self, seed):
        rng = np.random.default_rng(seed)
        k = np.full((3, 3), INF)
        for i, j in ((0, 1), (0, 2), (1, 2)):
            if rng.random() < 0.7:
                k[i, j] = float(rng.integers(1, 3))
        W = rng.integers(0, 5, size=3).astype(float)
        V = m_envelope(k, W)
        assert np.all(V <= W) and np.all(V <= jump_operator(k, V))
        for candidate in itertools.product(range(5), repeat=3):
            c = np.array(candidate, dtype=float)
            if np.all(c <= W) and np.all(c <= jump_operator(k, c)):
                assert np.all(c <= V), (candidate, V.tolist())


class TestAlpha:
    def test_strictly_below_the_obstacle(self):
        k = np.array([[INF, 1.0], [INF, INF]])
        assert not np.any(alpha_target(k, np.array([0.5, 0.0]), 1e-9))

    def test_unique_jump(self):
        k = np.array([[INF, 1.0], [INF, INF]])
        alpha = alpha_target(k, np.array([5.0, 0.0]), 1e-9)
        np.testing.assert_array_equal(alpha, [[0.0, 1.0], [0.0, 0.0]])

    def test_tie_is_split_uniformly(self):
        k = np.array([[INF, 1.0, 1.0], [INF, INF, INF], [INF, INF, INF]])
        alpha = alpha_target(k, np.array([5.0, 0.0, 0.0]), 1e-9)
        np.testing.assert_allclose(alpha[0], [0.0, 0.5, 0.5])
        assert np.all(alpha.sum(axis=-1) <= 1.0)

    def test_read_from_a_field(self):
        k = np.array([[INF, 1.0], [INF, INF]])
        field_ = field_from(lambda t, X: np.broadcast_to([5.0, 0.0], X.shape), 2, 1.0, 0.5)
        alpha = alpha_from_value(k, field_, [0.25, 0.25])
        np.testing.assert_allclose(alpha, [[0.0, 1.0], [0.0, 0.0]])

    def test_frame_lists_nonzero_entries(self):
        grid = build_grid(2, 1.0, 0.5)
        alpha = np.zeros((grid.size, 2, 2))
        alpha[3, 0, 1] = 1.0
        frame = alpha_to_frame(grid, alpha)
        assert frame.to_dict("records") == [{"node": 3, "i": 0, "j": 1, "alpha": 1.0}]


class TestImpulseScheme:
    def test_redistribution_conserves_mass(self, two_state):
        spec, k = two_state
        grid = build_grid(2, 1.0, 0.25)
        scheme = ImpulseScheme(spec, grid, k, 0.1)
        scheme.alpha = np.random.default_rng(4).dirichlet(np.ones(3), size=(grid.size, 2))[..., :2]
        np.testing.assert_allclose(scheme.redistribution().sum(axis=1), 0.0, atol=1e-12)

    def test_period_two_active_sets_raise(self, two_state):
        spec, k = two_state
        grid = build_grid(2, 1.0, 0.5)
        scheme = ImpulseScheme(spec, grid, k, 0.1, chatter_window=4)
        active = np.tile([5.0, 1.0], (grid.size, 1))
        idle = np.tile([0.0, 1.0], (grid.size, 1))
        with pytest.raises(ChatteringError) as info:
            for sweep, U in enumerate([active, idle, active, idle]):
                scheme.before_sweep(U, sweep)
        assert info.value.witness["set_a"] != info.value.witness["set_b"]


class TestSolvePenalizedImpulse:
    def test_forbidden_jumps_reduce_to_the_plain_solve(self):
        spec = identity_model(2, r=1.0)
        grid = build_grid(2, 1.0, 0.25)
        field_, alpha = solve_penalized_impulse(spec, np.full((2, 2), INF), grid, 0.1)
        np.testing.assert_allclose(field_.slice(), solve_stationary(spec, grid).slice(), atol=1e-10)
        assert not np.any(alpha)

    def test_cyclic_costs_are_refused(self, two_state):
        spec, _ = two_state
        with pytest.raises(HypothesisError):
            solve_penalized_impulse(spec, np.array([[INF, 1.0], [1.0, INF]]), build_grid(2, 1.0, 0.5), 0.1)

    def test_two_state_obstacle(self, two_state):
        spec, k = two_state
        h, eps = 1.0 / 8, 0.01
        field_, alpha = solve_penalized_impulse(spec, k, build_grid(2, 1.0, h), eps)
        U = field_.slice()
        np.testing.assert_allclose(U[:, 0], (5 * eps + 2) / (1 + eps), rtol=1e-6)
        np.testing.assert_allclose(U[:, 1], 1.0, rtol=1e-6)
        assert np.all(np.abs(U - [2.0, 1.0]) <= 3 * (h + eps))
        assert np.all(U <= jump_operator(k, U) + 3 * eps)
        np.testing.assert_allclose(alpha[:, 0, 1], 1.0, atol=1e-6)

        report = verify_impulse(field_, spec, k, n_samples=300, tol=3 * (h + eps), seed=5, workers=2)
        assert report.passed, report.worst_witness

    def test_returned_alpha_is_the_exact_split(self, two_state):
        spec, k = two_state
        field_, alpha = solve_penalized_impulse(spec, k, build_grid(2, 1.0, 0.25), 0.01, relaxation=0.01)
        np.testing.assert_array_equal(alpha, alpha_target(k, field_.slice(), 1e-9))
        np.testing.assert_array_equal(alpha[:, 0, 1], 1.0)

    def test_obstacle_violation_is_linear_in_eps(self, two_state):
        spec, k = two_state
        grid = build_grid(2, 1.0, 0.25)
        for eps in (0.04, 0.02, 0.01):
            field_, _ = solve_penalized_impulse(spec, k, grid, eps)
            assert 0.5 <= field_.meta["obstacle_violation"] / (3 * eps) <= 2.0
