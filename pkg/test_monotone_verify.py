#!/usr/bin/env python3
"""
Tests for monotone_verify: Stegall perturbations, the sampled verifiers,
monitors and certificates.
"""

import numpy as np
import pytest

from conftest import constant_model, field_from, identity_model
from grid_solver import build_grid, solve_stationary, solve_td
from model_core import DegenerateObjectiveError, ModelSpec, UnsupportedModeError
from monotone_verify import (
    consistency_check,
    cross_monotonicity,
    lipschitz_certificate,
    monotonicity_monitor,
    stability_sweep,
    stegall_perturb,
    verify_impulse,
    verify_phi_monotone,
    verify_stationary,
    verify_stopping,
    verify_td,
)

INF = np.inf


def zero(x, p):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))


def identity_jacobian(x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],))


class TestStegall:
    def test_strict_minimum_is_kept(self):
        points = np.array([[0.0], [1.0], [2.0]])
        result = stegall_perturb(np.array([0.0, 1.0, 2.0]), points, 1e-3, seed=1)
        assert result.minimizer == 0
        assert result.draws == 1

    def test_tie_is_broken_by_the_sign_of_the_shift(self):
        points = np.array([[0.0, 0.0], [1.0, 0.0]])
        result = stegall_perturb(np.zeros(2), points, 1e-2, seed=2)
        assert result.minimizer == (0 if result.a[0] > 0 else 1)

    def test_matches_exhaustive_argmin(self):
        rng = np.random.default_rng(8)
        for trial in range(1000):
            points = rng.random((1000, 3))
            objective = rng.integers(0, 50, size=1000).astype(float)  # plenty of exact ties
            result = stegall_perturb(objective, points, 1e-3, seed=[8, trial])
            assert result.minimizer == int(np.argmin(objective + points @ result.a))

    def test_identical_points_stay_degenerate(self):
        with pytest.raises(DegenerateObjectiveError):
            stegall_perturb(np.zeros(3), np.zeros((3, 2)), 1e-3, seed=3)

    def test_non_finite_objective(self):
        with pytest.raises(DegenerateObjectiveError):
            stegall_perturb(np.array([0.0, np.nan]), np.eye(2), 1e-3)


class TestVerifyStationary:
    def test_constant_solution_has_zero_margins(self):
        spec = constant_model(2, 1.5, [0.4, -1.0])
        field_ = field_from(lambda t, x: np.tile([0.4, -1.0], (len(x), 1)), 2, 1.0, 0.25)
        report = verify_stationary(field_, spec, n_samples=200, seed=3)
        assert report.passed
        assert report.worst_margin == pytest.approx(0.0, abs=1e-12)

    def test_sign_flipped_candidate_fails(self):
        field_ = field_from(lambda t, x: -x, 2, 1.0, 0.125)
        report = verify_stationary(field_, identity_model(2), n_samples=300, seed=4)
        assert not report.passed
        assert report.worst_margin < 0
        assert set(report.worst_witness) >= {"V", "y", "x0", "a", "sample"}

    def test_solver_output_passes(self, monotone_1d):
        h = 1.0 / 16
        field_ = solve_stationary(monotone_1d, build_grid(1, 1.0, h))
        assert verify_stationary(field_, monotone_1d, n_samples=400, tol=2 * h, seed=5).passed

    def test_identity_solution_passes(self):
        spec = identity_model(2)
        field_ = solve_stationary(spec, build_grid(2, 1.0, 0.125))
        assert verify_stationary(field_, spec, n_samples=300, tol=1e-6, seed=6).passed

    def test_report_does_not_depend_on_workers(self):
        field_ = field_from(lambda t, x: -x, 2, 1.0, 0.125)
        spec = identity_model(2)
        serial = verify_stationary(field_, spec, n_samples=120, seed=9, workers=1)
        threaded = verify_stationary(field_, spec, n_samples=120, seed=9, workers=4)
        assert serial.to_dict() == threaded.to_dict()

    def test_needs_a_discount(self, transport_model):
        field_ = field_from(lambda t, x: x.copy(), 1, 1.0, 0.25)
        with pytest.raises(UnsupportedModeError):
            verify_stationary(field_, transport_model, n_samples=10)


class TestVerifyTd:
    @staticmethod
    def _linear_growth(g0, U0):
        return ModelSpec(d=2, F=zero, G=lambda x, p: np.full(np.broadcast_shapes(np.shape(x), np.shape(p)), g0),
                         U0=U0)

    def test_linear_growth_is_an_equality(self):
        spec = self._linear_growth(1.5, lambda x: np.zeros(np.shape(x)))
        field_ = field_from(lambda t, x: np.full(x.shape, 1.5 * t), 2, 1.0, 0.25, times=np.linspace(0, 1, 11))
        report = verify_td(field_, spec, n_samples=200, seed=2)
        assert report.passed
        assert report.worst_margin == pytest.approx(0.0, abs=1e-9)

    def test_initial_clause(self):
        spec = self._linear_growth(1.5, lambda x: np.ones(np.shape(x)))
        field_ = field_from(lambda t, x: np.full(x.shape, 1.5 * t), 2, 1.0, 0.25, times=np.linspace(0, 1, 11))
        report = verify_td(field_, spec, n_samples=50, seed=2)
        assert not report.passed
        assert not report.clauses["initial"]["passed"]

    def test_single_slice_is_unsupported(self, transport_model):
        with pytest.raises(UnsupportedModeError):
            verify_td(field_from(lambda t, x: x.copy(), 1, 1.0, 0.25), transport_model)

    def test_transport_solve_passes(self, transport_model):
        h, dt = 1.0 / 32, 1.0 / 64
        field_ = solve_td(transport_model, build_grid(1, 1.0, h), 1.0, dt)
        assert verify_td(field_, transport_model, n_samples=400, tol=5 * (h + dt), seed=7).passed


class TestVerifyStopping:
    def test_positive_values_fail_the_constraint(self):
        spec = constant_model(2, 1.0, [-1.0, -1.0])
        field_ = field_from(lambda t, x: np.tile([1e-5, -1.0], (len(x), 1)), 2, 1.0, 0.25)
        report = verify_stopping(field_, spec, tol=1e-6)
        assert not report.passed
        assert not report.clauses["constraint"]["passed"]

    def test_slack_constraint_reduces_to_the_plain_definition(self):
        spec = constant_model(2, 1.0, [-0.5, -1.0])
        field_ = solve_stationary(spec, build_grid(2, 1.0, 0.25))
        report = verify_stopping(field_, spec, n_samples=300, seed=3)
        assert report.passed


class TestVerifyImpulse:
    def test_obstacle_violation_fails(self):
        spec = constant_model(2, 1.0, [5.0, 1.0])
        k = np.array([[INF, 1.0], [INF, INF]])
        field_ = field_from(lambda t, x: np.tile([2.1, 1.0], (len(x), 1)), 2, 1.0, 0.25)
        report = verify_impulse(field_, spec, k, tol=1e-3)
        assert not report.passed
        assert report.clauses["obstacle"]["witness"]["component"] == 0

    def test_forbidden_jumps_match_the_plain_verifier(self):
        spec = identity_model(2)
        field_ = field_from(lambda t, x: 2.0 * x, 2, 1.0, 0.125)
        plain = verify_stationary(field_, spec, n_samples=200, seed=11)
        impulse = verify_impulse(field_, spec, np.full((2, 2), INF), n_samples=200, seed=11)
        assert plain.verdict == impulse.verdict
        assert impulse.worst_margin == pytest.approx(plain.worst_margin, abs=1e-9)
        assert impulse.worst_witness["x0"] == plain.worst_witness["x0"]


class TestVerifyPhiMonotone:
    def test_identity_reduces_to_the_plain_verifier(self):
        spec = identity_model(2)
        field_ = field_from(lambda t, x: -x, 2, 1.0, 0.125)
        plain = verify_stationary(field_, spec, n_samples=150, seed=12)
        weighted = verify_phi_monotone(field_, spec, lambda x: np.array(x, dtype=float), identity_jacobian,
                                       n_samples=150, seed=12)
        assert weighted.worst_margin == plain.worst_margin
        assert weighted.verdict == plain.verdict

    def test_scaling_on_a_constant_solution(self):
        spec = constant_model(2, 1.0, [0.3, 0.7])
        field_ = field_from(lambda t, x: np.tile([0.3, 0.7], (len(x), 1)), 2, 1.0, 0.25)
        report = verify_phi_monotone(field_, spec, lambda x: 2.0 * np.asarray(x),
                                     lambda x: 2.0 * identity_jacobian(x), n_samples=100, seed=1)
        assert report.worst_margin == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_weight_on_the_identity_coupling(self):
        spec = identity_model(2)
        field_ = field_from(lambda t, x: x.copy(), 2, 1.0, 0.125)
        report = verify_phi_monotone(field_, spec, lambda x: np.asarray(x) + 0.1 * np.asarray(x) ** 2,
                                     n_samples=200, seed=2)
        assert report.passed
        assert report.details["phi_admissible"]["verdict"] == "pass(sampled)"


class TestMonitor:
    def test_identity_field(self):
        result = monotonicity_monitor(field_from(lambda t, x: x.copy(), 2, 1.0, 0.25))
        assert result.min_value == 0.0
        assert result.exhaustive

    def test_reversed_field(self):
        result = monotonicity_monitor(field_from(lambda t, x: -x, 1, 1.0, 0.25))
        assert result.min_value == pytest.approx(-1.0)
        assert sorted([result.witness["x"][0], result.witness["y"][0]]) == [0.0, 1.0]

    def test_pair_cap_subsamples(self):
        result = monotonicity_monitor(field_from(lambda t, x: x.copy(), 2, 1.0, 0.125), pair_cap=100)
        assert not result.exhaustive
        assert result.pairs == 100

    def test_cross_pairs_of_a_field_with_itself(self):
        field_ = field_from(lambda t, x: -x, 2, 1.0, 0.25)
        assert cross_monotonicity(field_, field_).min_value == pytest.approx(monotonicity_monitor(field_).min_value)


class TestLipschitz:
    def test_identity_field_certified(self):
        cert = lipschitz_certificate(field_from(lambda t, x: x.copy(), 2, 1.0, 0.25), alpha=0.5)
        assert cert.min_Z == pytest.approx(0.5)
        assert cert.bound == pytest.approx(2.0)
        assert cert.certified

    def test_too_large_alpha(self):
        assert not lipschitz_certificate(field_from(lambda t, x: x.copy(), 2, 1.0, 0.25), alpha=2.0).certified

    def test_constant_field(self):
        cert = lipschitz_certificate(field_from(lambda t, x: np.full(x.shape, 2.0), 2, 1.0, 0.25))
        assert cert.min_Z == 0.0
        assert cert.certified


class TestConsistencyAndStability:
    def test_solver_output_is_consistent(self, monotone_1d):
        field_ = solve_stationary(monotone_1d, build_grid(1, 1.0, 1.0 / 16))
        report = consistency_check(field_, monotone_1d, tol=1e-6)
        assert report.passed
        assert report.positive_definite_nodes == report.nodes

    def test_perturbed_drifts_approach_the_base_solve(self, monotone_1d):
        sweep = stability_sweep(monotone_1d, 1, 1.0, 0.125)
        assert sweep["decreasing"]
        assert sweep["distances"][16] < sweep["distances"][4]
