#!/usr/bin/env python3
"""
Characteristics of the master equation for lambda = 0.

    dV/dt = G(y, V),  V(0) = U0(y(0))
    dy/dt = F(y, V),  y(t_f) = y0

The shooting unknown is the initial point z = y(0); the value at (t_f, y0)
is V(t_f).
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd

from config import (
    BETA_PRIME_AT_ZERO,
    ORTHANT_CLIP_TOL,
    SHOOTING_FD_STEP,
    SHOOTING_MAX_HALVINGS,
    SHOOTING_MAX_ITER,
)
from model_core import (
    BlowUpError,
    ConfigError,
    ModelSpec,
    ShootingError,
    TrajectoryEscapeError,
    UnsupportedModeError,
    as_orthant_point,
)

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    times: np.ndarray
    y: np.ndarray
    V: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        d = self.y.shape[1]
        data = {"t": self.times}
        for k in range(d):
            data[f"y_{k + 1}"] = self.y[:, k]
        for k in range(d):
            data[f"V_{k + 1}"] = self.V[:, k]
        return pd.DataFrame(data)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _require_no_noise(spec: ModelSpec) -> None:
    if spec.lam != 0:
        raise UnsupportedModeError("characteristics are only available for lambda = 0",
                                   module="characteristics", witness={"lambda": spec.lam})


def _rk4_step(spec: ModelSpec, y: np.ndarray, V: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    k1y, k1v = spec.dynamics(y, V)
    k2y, k2v = spec.dynamics(y + 0.5 * dt * k1y, V + 0.5 * dt * k1v)
    k3y, k3v = spec.dynamics(y + 0.5 * dt * k2y, V + 0.5 * dt * k2v)
    k4y, k4v = spec.dynamics(y + dt * k3y, V + dt * k3v)
    y_new = y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    V_new = V + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return y_new, V_new


def _project(y: np.ndarray, t: float) -> np.ndarray:
    if np.any(y < -ORTHANT_CLIP_TOL):
        raise TrajectoryEscapeError(f"trajectory left the orthant at t={t:.6g}", module="characteristics",
                                    witness={"t": t, "y": y.tolist()})
    return np.maximum(y, 0.0)


def _integrate(spec: ModelSpec, z: np.ndarray, t_f: float, dt: float, keep: bool,
               stiff: Optional[Callable[[np.ndarray, np.ndarray, float], Tuple[np.ndarray, np.ndarray]]] = None
               ) -> Trajectory:
    if dt <= 0 or t_f < 0:
        raise ConfigError(f"need dt > 0 and t_f >= 0, got dt={dt}, t_f={t_f}", module="characteristics")
    n_steps = int(math.ceil(t_f / dt - 1e-9)) if t_f > 0 else 0
    h = t_f / n_steps if n_steps else 0.0
    y = np.array(z, dtype=float)
    V = spec.initial(y)
    times, ys, Vs = [0.0], [y.copy()], [V.copy()]
    for step in range(1, n_steps + 1):
        if stiff is not None:
            y, V = stiff(y, V, 0.5 * h)
        y, V = _rk4_step(spec, y, V, h)
        if stiff is not None:
            y, V = stiff(y, V, 0.5 * h)
        t = step * h
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(V))):
            raise BlowUpError(f"characteristic blew up at t={t:.6g}", module="characteristics", witness={"t": t})
        y = _project(y, t)
        if keep or step == n_steps:
            times.append(t)
            ys.append(y.copy())
            Vs.append(V.copy())
    if not keep and n_steps:
        times, ys, Vs = times[-1:], ys[-1:], Vs[-1:]
    return Trajectory(np.array(times), np.array(ys), np.array(Vs))


def integrate_coupled(spec: ModelSpec, z, t_f: float, dt: float) -> Trajectory:
    """
    Forward RK4 integration of (y, V) from y(0) = z, V(0) = U0(z).

    Raises:
        UnsupportedModeError: if lambda != 0
        TrajectoryEscapeError: if a coordinate drops below -1e-8
    """
    _require_no_noise(spec)
    return _integrate(spec, as_orthant_point(z, spec.d), t_f, dt, keep=True)


@dataclass
class ShootingResult:
    value: np.ndarray
    z: np.ndarray
    residual: float
    iterations: int


def shoot(spec: ModelSpec, y0, t_f: float, dt: float, tol: float = 1e-10,
          max_iter: int = SHOOTING_MAX_ITER) -> ShootingResult:
    """Damped Newton shooting on z with a fixed-point fallback."""
    _require_no_noise(spec)
    y0 = as_orthant_point(y0, spec.d)

    def miss(z):
        try:
            end = _integrate(spec, z, t_f, dt, keep=False)
        except (TrajectoryEscapeError, BlowUpError):
            return None, np.inf
        gap = end.y[-1] - y0
        return (gap, end.V[-1]), float(np.max(np.abs(gap)))

    z = y0.copy()
    state, norm = miss(z)
    if state is None:
        raise ShootingError("initial guess z = y0 does not integrate", module="characteristics",
                            witness={"z": z.tolist()})
    best = (norm, z.copy(), state[1])
    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            break
        gap = state[0]
        J = np.zeros((spec.d, spec.d))
        for k in range(spec.d):
            step = SHOOTING_FD_STEP * (1.0 + abs(z[k]))
            zk = z.copy()
            zk[k] += step
            shifted, _ = miss(zk)
            if shifted is None:
                zk[k] -= 2.0 * step
                shifted, _ = miss(zk)
                step = -step
            if shifted is None:
                J[:, k] = np.nan
                continue
            J[:, k] = (shifted[0] - gap) / step
        accepted = False
        if np.all(np.isfinite(J)):
            delta = np.linalg.lstsq(J, -gap, rcond=None)[0]
            damping = 1.0
            for _ in range(SHOOTING_MAX_HALVINGS):
                trial = np.maximum(z + damping * delta, 0.0)
                trial_state, trial_norm = miss(trial)
                if trial_state is not None and trial_norm < norm:
                    z, state, norm = trial, trial_state, trial_norm
                    accepted = True
                    break
                damping *= 0.5
        if not accepted:
            trial = np.maximum(z - gap, 0.0)
            trial_state, trial_norm = miss(trial)
            if trial_state is None or trial_norm >= norm:
                break
            z, state, norm = trial, trial_state, trial_norm
            logger.debug(f"fixed-point fallback at iteration {iteration}")
        if norm < best[0]:
            best = (norm, z.copy(), state[1])
    if best[0] > tol:
        raise ShootingError(f"shooting stalled at residual {best[0]:.3e}", module="characteristics",
                            witness={"residual": best[0], "z": best[1].tolist(), "y0": y0.tolist()})
    return ShootingResult(best[2], best[1], best[0], iteration if max_iter else 0)


def solve_bvp(spec: ModelSpec, y0, t_f: float, dt: float, tol: float = 1e-10) -> np.ndarray:
    """Value U(t_f, y0) from the characteristic through y0 at time t_f."""
    result = shoot(spec, y0, t_f, dt, tol)
    logger.info(f"✅ solve_bvp: z={result.z}, U={result.value}, residual {result.residual:.2e}")
    return result.value


def integrate_penalized(spec: ModelSpec, z, t_f: float, dt: float, eps: float,
                        beta_prime_at_zero: float = BETA_PRIME_AT_ZERO) -> Trajectory:
    """
    Characteristics of the penalized stopping system.

        dV/dt = G(y, V) - beta(V)/eps
        dy/dt = F(y, V) + beta'(V) * y / eps

    The stiff part is integrated exactly (V decays, y grows componentwise while
    V > 0) and Strang-split around the RK4 step.
    """
    _require_no_noise(spec)
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}", module="characteristics")

    def stiff(y, V, tau):
        active = V > 0
        contact = V == 0
        rate = np.where(active, 1.0, np.where(contact, beta_prime_at_zero, 0.0))
        if not np.any(rate):
            return y, V
        V = np.where(active, V * math.exp(-tau / eps), V)
        y = np.where(rate > 0, y * np.exp(rate * tau / eps), y)
        return y, V

    return _integrate(spec, as_orthant_point(z, spec.d), t_f, dt, keep=True, stiff=stiff)
