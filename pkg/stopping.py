#!/usr/bin/env python3
"""
Optimal stopping through penalization.

The obstacle is U <= upper (upper = 0 for free exit). The penalty
beta(U - upper)/eps is integrated implicitly node by node; the extra transport
beta'(U - upper) * x / eps stays explicit and enters the CFL bound.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    BETA_PRIME_AT_ZERO,
    CONTINUATION_SPREAD,
    DEFAULT_SEED,
    EPS_FIRST,
    EPS_LEVELS,
    EPS_RATIO,
    SOLVER_TOL,
    STAGNATION_WINDOW,
    TOL_ALGEBRAIC,
)
from grid_solver import Grid, GridField, MasterEquationScheme, _precheck, gradient
from model_core import (
    AmbiguityError,
    ConfigError,
    ModelSpec,
    NonConvergenceError,
    as_orthant_point,
)

logger = logging.getLogger(__name__)


def default_schedule(first: float = EPS_FIRST, ratio: float = EPS_RATIO, levels: int = EPS_LEVELS) -> List[float]:
    return [first * ratio ** k for k in range(levels)]


@dataclass
class StoppingConfig:
    eps_schedule: Sequence[float] = field(default_factory=default_schedule)
    beta_prime_at_zero: float = BETA_PRIME_AT_ZERO

    def __post_init__(self):
        eps = [float(e) for e in self.eps_schedule]
        if not eps or any(e <= 0 for e in eps):
            raise ConfigError("eps schedule must be nonempty and positive", module="stopping",
                              witness={"eps_schedule": eps})
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps schedule must be strictly decreasing", module="stopping",
                              witness={"eps_schedule": eps})
        if not 0.0 <= self.beta_prime_at_zero <= 1.0:
            raise ConfigError(f"beta'(0) must lie in [0, 1], got {self.beta_prime_at_zero}", module="stopping")
        if eps[-1] > 1e-4 * eps[0]:
            logger.warning(f"⚠️ eps schedule stops at {eps[-1]:g} > 1e-4 x first level; limit is coarse")
        self.eps_schedule = eps


class PenalizedScheme(MasterEquationScheme):
    def __init__(self, spec: ModelSpec, grid: Grid, eps: float,
                 beta_prime_at_zero: float = BETA_PRIME_AT_ZERO, upper: float = 0.0):
        """
        Scheme for rU + beta(U - upper)/eps + (beta'(U - upper)*x/eps + F).grad U + noise = G.

        Args:
            spec: Model instance
            grid: Grid on B_R^1
            eps: Penalization parameter
            beta_prime_at_zero: Subgradient selection at contact
            upper: Obstacle level
        """
        super().__init__(spec, grid)
        if eps <= 0:
            raise ConfigError(f"eps must be > 0, got {eps}", module="stopping")
        self.eps = eps
        self.beta_prime_at_zero = beta_prime_at_zero
        self.upper = upper

    def beta_prime(self, U: np.ndarray) -> np.ndarray:
        gap = U - self.upper
        return np.where(gap > 0, 1.0, np.where(gap == 0, self.beta_prime_at_zero, 0.0))

    def velocity(self, U: np.ndarray, F: np.ndarray) -> np.ndarray:
        return F + self.beta_prime(U) * self.grid.coords / self.eps

    def reaction(self, U: np.ndarray) -> np.ndarray:
        return np.maximum(U - self.upper, 0.0) / self.eps

    def implicit(self, rhs: np.ndarray, dtau: np.ndarray) -> np.ndarray:
        # u + (dtau/eps) * (u - upper)_+ = rhs, solved in closed form
        k = dtau / self.eps
        return np.where(rhs <= self.upper, rhs, (rhs + k * self.upper) / (1.0 + k))


def solve_penalized_stationary(spec: ModelSpec, grid: Grid, eps: float, tol: float = SOLVER_TOL,
                               beta_prime_at_zero: float = BETA_PRIME_AT_ZERO, upper: float = 0.0,
                               U_init: Optional[np.ndarray] = None, force: bool = False,
                               seed: int = DEFAULT_SEED, window: int = STAGNATION_WINDOW) -> GridField:
    """False-transient solve of the penalized stationary stopping equation."""
    if spec.r is None:
        raise ConfigError("stationary solve needs a discount rate r", module="stopping")
    _precheck(spec, grid, stationary=True, force=force, seed=seed)
    scheme = PenalizedScheme(spec, grid, eps, beta_prime_at_zero, upper)
    U, residual, sweeps = scheme.relax(U_init, tol, window)
    logger.info(f"✅ penalized stationary eps={eps:g}: {sweeps} sweeps, residual {residual:.2e}")
    return GridField(grid, np.array([0.0]), U[None], {"eps": eps, "residual": residual, "sweeps": sweeps})


def solve_penalized_td(spec: ModelSpec, grid: Grid, eps: float, t_f: float, dt: float,
                       beta_prime_at_zero: float = BETA_PRIME_AT_ZERO, upper: float = 0.0,
                       force: bool = False, store_every: int = 1, seed: int = DEFAULT_SEED) -> GridField:
    """Explicit march of the penalized time-dependent equation from the unclipped U0."""
    _precheck(spec, grid, stationary=False, force=force, seed=seed)
    scheme = PenalizedScheme(spec, grid, eps, beta_prime_at_zero, upper)
    field_ = scheme.march(spec.initial(grid.coords), t_f, dt, store_every)
    field_.meta["eps"] = eps
    return field_


@dataclass
class ContinuationCertificate:
    eps: float
    max_positive_part: float
    grad_norm: float
    residual: float
    max_lower_violation: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        out = {"eps": self.eps, "max_positive_part": self.max_positive_part,
               "grad_norm": self.grad_norm, "residual": self.residual}
        if self.max_lower_violation is not None:
            out["max_lower_violation"] = self.max_lower_violation
        return out


def continuation_limit(spec: ModelSpec, grid: Grid, config: StoppingConfig, tol: float = SOLVER_TOL,
                       upper: float = 0.0, lower: Optional[float] = None, force: bool = False,
                       seed: int = DEFAULT_SEED, window: int = STAGNATION_WINDOW) -> GridField:
    """
    Solve the penalized problem along the eps schedule with warm starts.

    The returned field is the last level; meta["certificates"] holds one
    ContinuationCertificate per level and meta["warnings"] flags a
    max_positive_part/eps spread above CONTINUATION_SPREAD.
    """
    U = None
    certificates: List[ContinuationCertificate] = []
    field_ = None
    for level, eps in enumerate(config.eps_schedule):
        field_ = solve_penalized_stationary(spec, grid, eps, tol, config.beta_prime_at_zero, upper,
                                            U_init=U, force=force, seed=seed, window=window)
        U = field_.slice(0)
        _, grad_norm = gradient(field_)
        cert = ContinuationCertificate(
            eps=eps,
            max_positive_part=float(np.max(np.maximum(U - upper, 0.0))),
            grad_norm=grad_norm,
            residual=float(field_.meta["residual"]),
            max_lower_violation=None if lower is None else float(np.max(np.maximum(lower - U, 0.0))),
        )
        certificates.append(cert)
        logger.info(f"📊 level {level}: eps={eps:g} max(U-upper)+={cert.max_positive_part:.3e} "
                    f"|DU|={grad_norm:.3f}")

    warnings: List[str] = []
    slopes = np.array([c.max_positive_part / c.eps for c in certificates if c.max_positive_part > TOL_ALGEBRAIC])
    if len(slopes) >= 2 and slopes.max() > CONTINUATION_SPREAD * slopes.min():
        warnings.append(f"continuation-suspect: max_positive_part/eps ranges over "
                        f"[{slopes.min():.3g}, {slopes.max():.3g}]")
    grads = np.array([c.grad_norm for c in certificates])
    if len(grads) >= 2 and grads.min() > 0 and grads.max() > 1.25 * grads.min():
        warnings.append(f"gradient norm varies by {grads.max() / grads.min() - 1:.0%} across levels")
    for message in warnings:
        logger.warning(f"⚠️ {message}")
    field_.meta.update({
        "certificates": [c.to_dict() for c in certificates],
        "warnings": warnings,
        "eps_last": config.eps_schedule[-1],
    })
    return field_


def exit_set(field_: GridField, x, tol: float = 1e-6, upper: float = 0.0, index: int = -1) -> List[int]:
    """States i with U^i(x) >= upper - tol (0-based)."""
    x = as_orthant_point(x, field_.grid.d)
    U = field_.interpolate(x[None], index)[0]
    return [int(i) for i in np.flatnonzero(U >= upper - tol)]


@dataclass
class PostExitState:
    x_tilde: np.ndarray
    exit_set: List[int]
    residual: float
    pure_candidate: np.ndarray
    pure_coincides: bool
    pure_residual: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x_tilde": self.x_tilde.tolist(), "exit_set": self.exit_set, "residual": self.residual,
            "pure_candidate": self.pure_candidate.tolist(), "pure_coincides": self.pure_coincides,
            "pure_residual": self.pure_residual,
        }


def _post_exit_system(spec: ModelSpec, field_: GridField, x: np.ndarray, I: List[int], index: int):
    target = field_.interpolate(x[None], index)[0]

    def residual(w: np.ndarray) -> np.ndarray:
        xt = x.copy()
        xt[I] = w
        U = field_.interpolate(xt[None], index)[0]
        _, G = spec.dynamics(xt, U)
        return np.concatenate([U - target, G[I] * w])

    return residual


def _gauss_newton(residual, w0: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float,
                  max_iter: int = 200) -> Tuple[np.ndarray, float]:
    w = np.clip(w0, lo, hi)
    res = residual(w)
    norm = float(np.max(np.abs(res)))
    for _ in range(max_iter):
        if norm <= tol:
            break
        J = np.zeros((len(res), len(w)))
        for k in range(len(w)):
            step = 1e-7 * max(1.0, abs(w[k]))
            wk = w.copy()
            wk[k] = wk[k] - step if wk[k] + step > hi[k] else wk[k] + step
            J[:, k] = (residual(wk) - res) / (wk[k] - w[k])
        delta = np.linalg.lstsq(J, -res, rcond=None)[0]
        damping = 1.0
        improved = False
        for _ in range(30):
            trial = np.clip(w + damping * delta, lo, hi)
            trial_res = residual(trial)
            trial_norm = float(np.max(np.abs(trial_res)))
            if trial_norm < norm:
                w, res, norm = trial, trial_res, trial_norm
                improved = True
                break
            damping *= 0.5
        if not improved:
            break
    return w, norm


def post_exit_state(spec: ModelSpec, field_: GridField, x, tol: float = 1e-8,
                    exit_tol: float = 1e-6, index: int = -1) -> PostExitState:
    """
    Distribution right after the optimal exits from x.

    Solves x~^i = x^i off I(x), U(x~) = U(x), G^i(x~, U(x~)) x~^i = 0 on I(x)
    by projected Gauss-Newton from two starts (x itself and the pure-strategy
    candidate with x~^i = 0 on I(x)).

    Raises:
        AmbiguityError: if both starts converge to points more than 10*tol apart
        NonConvergenceError: if neither start converges
    """
    x = as_orthant_point(x, field_.grid.d)
    I = exit_set(field_, x, exit_tol, index=index)
    if not I:
        return PostExitState(x.copy(), [], 0.0, x.copy(), True, 0.0)

    residual = _post_exit_system(spec, field_, x, I, index)
    lo = np.zeros(len(I))
    hi = x[I].copy()
    pure = x.copy()
    pure[I] = 0.0
    pure_residual = float(np.max(np.abs(residual(lo))))

    solutions = []
    for start in (hi.copy(), lo.copy()):
        w, norm = _gauss_newton(residual, start, lo, hi, tol)
        if norm <= tol:
            solutions.append(w)
    if not solutions:
        raise NonConvergenceError("post-exit system did not converge from either start", module="stopping",
                                  witness={"x": x.tolist(), "exit_set": I})
    if len(solutions) == 2 and np.max(np.abs(solutions[0] - solutions[1])) > 10 * tol:
        raise AmbiguityError("post-exit system has two distinct solutions", module="stopping",
                             witness={"x": x.tolist(), "candidates": [s.tolist() for s in solutions]})
    x_tilde = x.copy()
    x_tilde[I] = solutions[0]
    final = float(np.max(np.abs(residual(solutions[0]))))
    coincides = bool(np.max(np.abs(x_tilde - pure)) <= 10 * tol)
    if not coincides:
        logger.info(f"🔍 mixed exit at x={x.tolist()}: x~={x_tilde.tolist()} (pure residual {pure_residual:.2e})")
    return PostExitState(x_tilde, I, final, pure, coincides, pure_residual)
