#!/usr/bin/env python3
"""
Tests for characteristics: forward integration, shooting and the penalized system.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from characteristics import integrate_coupled, integrate_penalized, shoot, solve_bvp
from model_core import ModelSpec, ShootingError, TrajectoryEscapeError, UnsupportedModeError


def zero(x, p):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))


def identity_drift(x, p):
    return np.asarray(x, dtype=float) + 0.0 * np.asarray(p)


def identity_initial(x):
    return np.array(x, dtype=float)


class TestIntegrateCoupled:
    def test_frozen_dynamics(self):
        spec = ModelSpec(d=2, F=zero, G=zero, U0=identity_initial)
        traj = integrate_coupled(spec, [2.0, 1.0], 1.0, 0.1)
        np.testing.assert_allclose(traj.y, np.broadcast_to([2.0, 1.0], traj.y.shape))
        np.testing.assert_allclose(traj.V, np.broadcast_to([2.0, 1.0], traj.V.shape))

    def test_linear_growth_of_the_value(self):
        spec = ModelSpec(d=1, F=zero, G=identity_drift, U0=lambda x: np.zeros(np.shape(x)))
        traj = integrate_coupled(spec, [2.0], 1.0, 0.1)
        assert traj.V[-1, 0] == pytest.approx(2.0, abs=1e-12)

    def test_exponential_decay(self, transport_model):
        traj = integrate_coupled(transport_model, [1.0], 1.0, 0.01)
        assert traj.y[-1, 0] == pytest.approx(math.exp(-1.0), rel=1e-9)
        assert traj.V[-1, 0] == pytest.approx(1.0, abs=1e-12)

    def test_times_increase(self, transport_model):
        traj = integrate_coupled(transport_model, [1.0], 1.0, 0.1)
        assert np.all(np.diff(traj.times) > 0)
        assert traj.times[-1] == pytest.approx(1.0)

    def test_escape_is_reported_with_a_time(self):
        spec = ModelSpec(d=1, F=lambda x, p: -np.ones(np.broadcast_shapes(np.shape(x), np.shape(p))), G=zero,
                         U0=identity_initial)
        with pytest.raises(TrajectoryEscapeError) as info:
            integrate_coupled(spec, [0.5], 1.0, 0.1)
        assert 0.5 <= info.value.witness["t"] <= 0.7

    def test_noise_is_unsupported(self):
        spec = ModelSpec(d=1, F=zero, G=zero, lam=1.0, U0=identity_initial)
        with pytest.raises(UnsupportedModeError):
            integrate_coupled(spec, [1.0], 1.0, 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0.0, max_value=4.0), st.floats(min_value=0.0, max_value=2.0),
           st.floats(min_value=0.0, max_value=2.0))
    def test_inward_linear_flux_keeps_the_orthant(self, c, z1, z2):
        spec = ModelSpec(d=2, F=lambda x, p: -c * np.asarray(x) + 0.0 * np.asarray(p), G=zero,
                         U0=identity_initial)
        traj = integrate_coupled(spec, [z1, z2], 1.0, 0.05)
        assert np.all(traj.y >= 0.0)


class TestShooting:
    def test_frozen_flux_returns_the_initial_value(self):
        spec = ModelSpec(d=2, F=zero, G=zero, U0=lambda x: np.asarray(x) ** 2)
        value = solve_bvp(spec, [0.5, 1.5], 1.0, 0.1)
        np.testing.assert_allclose(value, [0.25, 2.25], atol=1e-12)

    def test_inverts_the_exponential_flow(self, transport_model):
        result = shoot(transport_model, [1.0], 1.0, 0.01)
        assert result.z[0] == pytest.approx(math.e, rel=1e-8)
        assert result.value[0] == pytest.approx(math.e, rel=1e-8)

    def test_linear_drift_along_frozen_paths(self):
        spec = ModelSpec(d=2, F=zero, G=identity_drift, U0=identity_initial)
        np.testing.assert_allclose(solve_bvp(spec, [1.0, 1.0], 2.0, 0.1), [3.0, 3.0], atol=1e-10)

    def test_fourth_order_in_the_step(self, transport_model):
        exact = math.e * 0.5
        errors = [abs(solve_bvp(transport_model, [0.5], 1.0, dt)[0] - exact) for dt in (0.2, 0.1)]
        assert math.log2(errors[0] / errors[1]) >= 3.5

    def test_unreachable_target_raises(self):
        spec = ModelSpec(d=1, F=lambda x, p: np.ones(np.broadcast_shapes(np.shape(x), np.shape(p))), G=zero,
                         U0=identity_initial)
        # every path from the orthant ends at y >= 1
        with pytest.raises(ShootingError) as info:
            shoot(spec, [0.5], 1.0, 0.1)
        assert info.value.witness["residual"] > 0


class TestPenalized:
    def test_inactive_penalty_matches_plain_integration(self):
        spec = ModelSpec(d=1, F=zero, G=lambda x, p: -np.ones(np.broadcast_shapes(np.shape(x), np.shape(p))),
                         U0=lambda x: -np.asarray(x, dtype=float))
        plain = integrate_coupled(spec, [1.0], 1.0, 0.1)
        penalized = integrate_penalized(spec, [1.0], 1.0, 0.1, eps=0.01)
        np.testing.assert_array_equal(plain.y, penalized.y)
        np.testing.assert_array_equal(plain.V, penalized.V)

    def test_value_settles_at_the_penalty_balance(self):
        g, eps = 2.0, 0.01
        spec = ModelSpec(d=1, F=zero, G=lambda x, p: np.full(np.broadcast_shapes(np.shape(x), np.shape(p)), g),
                         U0=lambda x: np.zeros(np.shape(x)))
        traj = integrate_penalized(spec, [1.0], 1.0, 0.001, eps=eps)
        assert traj.V[-1, 0] == pytest.approx(g * eps, rel=0.02)

    def test_positive_part_scales_with_eps(self):
        g = 1.0
        spec = ModelSpec(d=1, F=zero, G=lambda x, p: np.full(np.broadcast_shapes(np.shape(x), np.shape(p)), g),
                         U0=lambda x: np.zeros(np.shape(x)))
        peaks = []
        for eps in (0.04, 0.02, 0.01):
            traj = integrate_penalized(spec, [0.1], 0.5, 0.001, eps=eps)
            peaks.append(float(np.max(np.maximum(traj.V, 0.0))))
        for eps, peak in zip((0.04, 0.02, 0.01), peaks):
            assert peak <= 1.05 * g * eps
