"""Shared fixtures for the solver and verifier tests."""

import numpy as np
import pytest

from config import DEFAULT_SEED
from grid_solver import GridField, build_grid
from model_core import ModelSpec, StateSampler


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-size solves (seconds to a minute)")


@pytest.fixture
def sampler():
    return StateSampler(2, 1.0, DEFAULT_SEED)


@pytest.fixture
def transport_model():
    """d=1, F=-x, G=0, U0=x; exact solution U(t, x) = x e^t."""
    return ModelSpec(
        d=1,
        F=lambda x, p: -np.asarray(x, dtype=float) + 0.0 * np.asarray(p),
        G=lambda x, p: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p))),
        U0=lambda x: np.array(x, dtype=float),
        name="transport",
    )


@pytest.fixture
def monotone_1d():
    """
    d=1, F = x - 1/2, G = 2x - p, r = 1.

    Monotone (the p-coupling of G cancels the x-coupling of F), inward at
    x = 0, outward flux beyond R = 1. Stationary solution U(x) = 2x/3 + 1/6.
    """
    return ModelSpec(
        d=1,
        F=lambda x, p: np.asarray(x, dtype=float) - 0.5 + 0.0 * np.asarray(p),
        G=lambda x, p: 2.0 * np.asarray(x, dtype=float) - np.asarray(p, dtype=float),
        r=1.0,
        U0=lambda x: np.array(x, dtype=float),
        name="monotone-1d",
    )


def constant_model(d: int, r: float, c) -> ModelSpec:
    """F = 0, G = r*c; the stationary solution is U = c."""
    c = np.asarray(c, dtype=float)
    return ModelSpec(
        d=d,
        F=lambda x, p: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p))),
        G=lambda x, p: np.broadcast_to(r * c, np.broadcast_shapes(np.shape(x), np.shape(p))),
        r=r,
        name="constant",
    )


def identity_model(d: int, r: float = 1.0) -> ModelSpec:
    """F = 0, G = x; the stationary solution is U = x / r."""
    return ModelSpec(
        d=d,
        F=lambda x, p: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p))),
        G=lambda x, p: np.asarray(x, dtype=float) + 0.0 * np.asarray(p),
        r=r,
        U0=lambda x: np.array(x, dtype=float),
        name="identity",
    )


def field_from(fn, d: int, R: float, h: float, times=None) -> GridField:
    """Tabulate fn(t, coords) -> (nodes, d) on a fresh grid."""
    grid = build_grid(d, R, h)
    times = np.array([0.0]) if times is None else np.asarray(times, dtype=float)
    values = np.stack([fn(t, grid.coords) for t in times])
    return GridField(grid, times, values)
