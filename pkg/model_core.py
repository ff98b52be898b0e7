#!/usr/bin/env python3
"""
Master-equation problem data and executable checks of the standing hypotheses.

A ModelSpec bundles (d, F, G, lambda, T, r, U0, R). F, G and U0 are numpy
callables vectorised over leading axes: x and p have shape (..., d) and the
maps return (..., d). The hypothesis checks are sampled: a pass is evidence,
a fail always carries a concrete witness.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from config import (
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    JACOBIAN_STEP,
    TOL_ALGEBRAIC,
    TOL_SAMPLED,
    VALUE_SCALE,
)

logger = logging.getLogger(__name__)

VectorMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


class MasterEquationError(Exception):
    """Base exception for the solver suite; carries the raising module and a witness."""

    def __init__(self, message: str, module: str = "", witness: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.module = module
        self.witness = witness or {}

    def __str__(self) -> str:
        base = super().__str__()
        return f"[{self.module}] {base}" if self.module else base


class ModelEvaluationError(MasterEquationError):
    """Custom exception for non-finite model outputs"""
    pass


class ConfigError(MasterEquationError):
    """Custom exception for invalid run configuration or model parameters"""
    pass


class UnsupportedModeError(MasterEquationError):
    """Custom exception for operations requested outside their supported setting"""
    pass


class DomainError(MasterEquationError):
    """Custom exception for points outside the orthant or the grid"""
    pass


class GridCapacityError(MasterEquationError):
    """Custom exception for grids above the node cap"""
    pass


class CFLViolationError(MasterEquationError):
    """Custom exception for time steps above the stability bound"""
    pass


class BlowUpError(MasterEquationError):
    """Custom exception for non-finite values during a march"""
    pass


class NonConvergenceError(MasterEquationError):
    """Custom exception for iterations that fail to reach tolerance"""
    pass


class ShootingError(NonConvergenceError):
    """Custom exception for shooting solves that do not hit the terminal point"""
    pass


class ChatteringError(NonConvergenceError):
    """Custom exception for period-2 cycling of the impulse active set"""
    pass


class TrajectoryEscapeError(MasterEquationError):
    """Custom exception for characteristics leaving the orthant"""
    pass


class HypothesisError(MasterEquationError):
    """Custom exception for specs refused because a standing hypothesis fails"""
    pass


class DegenerateObjectiveError(MasterEquationError):
    """Custom exception for objectives where no strict minimum could be produced"""
    pass


class AmbiguityError(MasterEquationError):
    """Custom exception for systems whose solution does not look unique"""
    pass


class ImpulseError(MasterEquationError):
    """Custom exception for internal failures of the jump-operator machinery"""
    pass


@dataclass
class ModelSpec:
    """One master-equation instance on the positive orthant."""

    d: int
    F: VectorMap
    G: VectorMap
    lam: float = 0.0
    T: Optional[np.ndarray] = None
    r: Optional[float] = None
    U0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    R: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"state count must be >= 1, got {self.d}", module="model_core")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}", module="model_core")
        if self.R <= 0:
            raise ConfigError(f"mass radius R must be > 0, got {self.R}", module="model_core")
        if self.r is not None and self.r <= 0:
            raise ConfigError(f"discount r must be > 0, got {self.r}", module="model_core")
        if self.T is None:
            self.T = np.eye(self.d)
        self.T = np.asarray(self.T, dtype=float)
        if self.T.shape != (self.d, self.d):
            raise ConfigError(f"T must be {self.d}x{self.d}, got {self.T.shape}", module="model_core")
        if np.any(self.T < 0):
            i, j = np.argwhere(self.T < 0)[0]
            raise ConfigError(
                f"T must be entrywise nonnegative, T[{i},{j}] = {self.T[i, j]}",
                module="model_core",
                witness={"entry": [int(i), int(j)], "value": float(self.T[i, j])},
            )

    def dynamics(self, x: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Evaluate (F, G) on a batch without the orthant check."""
        shape = np.broadcast_shapes(np.shape(x), np.shape(p))
        F = np.broadcast_to(np.asarray(self.F(x, p), dtype=float), shape)
        G = np.broadcast_to(np.asarray(self.G(x, p), dtype=float), shape)
        _require_finite(F, "F", x, p)
        _require_finite(G, "G", x, p)
        return F, G

    def initial(self, x: np.ndarray) -> np.ndarray:
        if self.U0 is None:
            raise UnsupportedModeError("time-dependent solve requested but spec has no U0", module="model_core")
        out = np.broadcast_to(np.asarray(self.U0(x), dtype=float), np.shape(x))
        _require_finite(out, "U0", x, None)
        return np.array(out)

    def noise_transpose(self, values: np.ndarray) -> np.ndarray:
        """T* applied componentwise to value vectors (..., d)."""
        return values @ self.T

    def with_drift(self, G: VectorMap, name: Optional[str] = None) -> "ModelSpec":
        return ModelSpec(
            d=self.d, F=self.F, G=G, lam=self.lam, T=self.T, r=self.r,
            U0=self.U0, R=self.R, name=name or self.name,
        )


def _require_finite(values: np.ndarray, component: str, x, p) -> None:
    if np.all(np.isfinite(values)):
        return
    bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))[0]
    witness: Dict[str, Any] = {"component": component, "index": bad.tolist()}
    lead = tuple(bad[:-1]) if np.ndim(values) > 1 else ()
    if x is not None:
        witness["x"] = np.asarray(x)[lead].tolist() if np.ndim(x) > 1 else np.asarray(x).tolist()
    if p is not None:
        witness["p"] = np.asarray(p)[lead].tolist() if np.ndim(p) > 1 else np.asarray(p).tolist()
    raise ModelEvaluationError(f"non-finite output from {component}", module="model_core", witness=witness)


def as_orthant_point(x, d: Optional[int] = None) -> np.ndarray:
    point = np.asarray(x, dtype=float)
    if d is not None and point.shape[-1] != d:
        raise DomainError(f"expected {d} coordinates, got {point.shape[-1]}", module="model_core")
    if np.any(point < 0):
        raise DomainError("point is outside the orthant", module="model_core", witness={"x": point.tolist()})
    return point


def eval_dynamics(spec: ModelSpec, x, p) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate the coupling maps at an orthant point.

    Args:
        spec: Model instance
        x: Orthant point(s), shape (..., d)
        p: Value vector(s), shape (..., d)

    Returns:
        Tuple (F(x, p), G(x, p))

    Raises:
        DomainError: if x has a negative coordinate
        ModelEvaluationError: if either map returns a non-finite value
    """
    x = as_orthant_point(x, spec.d)
    p = np.asarray(p, dtype=float)
    F, G = spec.dynamics(x, p)
    return np.array(F), np.array(G)


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float = JACOBIAN_STEP) -> np.ndarray:
    """Central-difference Jacobian J[..., i, k] = d fn_i / d z_k over a batch of points."""
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    columns = []
    for k in range(n):
        hk = step * np.maximum(1.0, np.abs(z[..., k]))
        zp = z.copy()
        zm = z.copy()
        zp[..., k] += hk
        zm[..., k] -= hk
        columns.append((np.asarray(fn(zp)) - np.asarray(fn(zm))) / (2.0 * hk[..., None]))
    J = np.stack(columns, axis=-1)
    if not np.all(np.isfinite(J)):
        raise ModelEvaluationError("non-finite finite-difference Jacobian", module="model_core")
    return J


class StateSampler:
    """Seeded source of orthant points and value vectors."""

    def __init__(self, d: int, R: float, seed: int = DEFAULT_SEED, value_scale: float = VALUE_SCALE):
        self.d = d
        self.R = R
        self.seed = seed
        self.value_scale = value_scale
        self.rng = np.random.default_rng(seed)

    def spawn(self, index: int) -> "StateSampler":
        """Independent substream for worker `index`."""
        child = StateSampler(self.d, self.R, self.seed, self.value_scale)
        child.rng = np.random.default_rng([self.seed, index])
        return child

    def simplex_points(self, n: int, radius: Optional[float] = None) -> np.ndarray:
        """Uniform points of B_radius^1."""
        radius = self.R if radius is None else radius
        w = self.rng.dirichlet(np.ones(self.d + 1), size=n)
        return radius * w[:, : self.d]

    def boundary_points(self, n: int) -> np.ndarray:
        x = self.simplex_points(n)
        zeroed = self.rng.integers(0, self.d, size=n)
        x[np.arange(n), zeroed] = 0.0
        # a quarter of the samples get a second zero coordinate
        if self.d > 1:
            extra = self.rng.random(n) < 0.25
            second = self.rng.integers(0, self.d, size=n)
            x[np.arange(n)[extra], second[extra]] = 0.0
        return x

    def shell_points(self, n: int) -> np.ndarray:
        """Points with R <= |x|_1 <= 2R."""
        direction = self.rng.dirichlet(np.ones(self.d), size=n)
        mass = self.rng.uniform(self.R, 2.0 * self.R, size=n)
        return direction * mass[:, None]

    def values(self, n: int) -> np.ndarray:
        return self.rng.uniform(-self.value_scale, self.value_scale, size=(n, self.d))


@dataclass
class HypothesisReport:
    hypothesis: str
    verdict: str
    margin: float
    witness: Optional[Dict[str, Any]] = None
    samples: int = 0
    tolerance: float = TOL_SAMPLED
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict.startswith("pass")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hypothesis": self.hypothesis,
            "verdict": self.verdict,
            "margin": float(self.margin),
            "witness": self.witness,
            "samples": self.samples,
            "tolerance": self.tolerance,
            "details": self.details,
        }


def _verdict(margin: float, tol: float, sampled: bool = True) -> str:
    if margin < -tol:
        return "fail"
    return "pass(sampled)" if sampled else "pass"


def _worst(margins: np.ndarray) -> int:
    return int(np.argmin(margins))


def _report(name: str, margins: np.ndarray, witness_fn: Callable[[int], Dict[str, Any]],
            tol: float, samples: int, sampled: bool = True,
            clauses: Optional[Dict[str, float]] = None) -> HypothesisReport:
    idx = _worst(margins)
    margin = float(margins[idx])
    witness = witness_fn(idx)
    details: Dict[str, Any] = {}
    for clause, clause_margin in (clauses or {}).items():
        details[clause] = float(clause_margin)
        if clause_margin < margin:
            margin = float(clause_margin)
            witness = {"clause": clause}
    verdict = _verdict(margin, tol, sampled)
    if verdict == "fail":
        logger.warning(f"⚠️ {name} fails with margin {margin:.3e}: {witness}")
    return HypothesisReport(name, verdict, margin, witness if verdict == "fail" else None,
                            samples, tol, details)


def check_hyp1(spec: ModelSpec, sampler: StateSampler, use_solution=None,
               n_samples: int = DEFAULT_N_SAMPLES, tol: float = TOL_SAMPLED) -> HypothesisReport:
    """Boundary components of F must not point out of the orthant; T must preserve it."""
    x = sampler.boundary_points(n_samples)
    if use_solution is not None:
        x = x * min(1.0, use_solution.grid.R / sampler.R)
        p = use_solution.interpolate(x)
    else:
        p = sampler.values(n_samples)
    F, _ = spec.dynamics(x, p)
    outward = np.where(x == 0.0, F, -np.inf).max(axis=-1)
    margins = -outward
    t_clause = float(np.min(spec.T))

    def witness(i):
        comp = int(np.argmax(np.where(x[i] == 0.0, F[i], -np.inf)))
        return {"x": x[i].tolist(), "p": p[i].tolist(), "component": comp, "F": F[i].tolist()}

    name = "hyp1-solution" if use_solution is not None else "hyp1"
    return _report(name, margins, witness, tol, n_samples, clauses={"T_nonnegative": t_clause})


def check_hyp2(spec: ModelSpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
               tol: float = TOL_SAMPLED) -> HypothesisReport:
    """Total flux must be nonnegative beyond mass R; T must map B_R^1 into itself."""
    x = sampler.shell_points(n_samples)
    p = sampler.values(n_samples)
    F, _ = spec.dynamics(x, p)
    margins = F.sum(axis=-1)
    column_sum = float(np.max(spec.T.sum(axis=0)))

    def witness(i):
        return {"x": x[i].tolist(), "p": p[i].tolist(), "flux": float(margins[i])}

    return _report("hyp2", margins, witness, tol, n_samples,
                   clauses={"T_ball_invariant": 1.0 - column_sum, "T_nonnegative": float(np.min(spec.T))})


def check_monotone(spec: ModelSpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
                   tol: float = TOL_SAMPLED) -> HypothesisReport:
    """Sampled pair-monotonicity of (G, F) and of U0."""
    x = sampler.simplex_points(n_samples)
    y = sampler.simplex_points(n_samples)
    U = sampler.values(n_samples)
    V = sampler.values(n_samples)
    Fx, Gx = spec.dynamics(x, U)
    Fy, Gy = spec.dynamics(y, V)
    pair = np.einsum("ni,ni->n", Gx - Gy, x - y) + np.einsum("ni,ni->n", Fx - Fy, U - V)
    u0_pair = None
    if spec.U0 is not None:
        u0_pair = np.einsum("ni,ni->n", spec.initial(x) - spec.initial(y), x - y)

    margins = pair if u0_pair is None else np.minimum(pair, u0_pair)

    def witness(i):
        clause = "U0" if u0_pair is not None and u0_pair[i] < pair[i] else "coupling"
        return {"clause": clause, "x": x[i].tolist(), "y": y[i].tolist(),
                "U": U[i].tolist(), "V": V[i].tolist()}

    return _report("monotone", margins, witness, tol, n_samples)


def _coupling_jacobian(spec: ModelSpec, x: np.ndarray, p: np.ndarray, step: float) -> np.ndarray:
    """Rows (G, F), columns (x, p)."""
    d = spec.d

    def stacked(z):
        F, G = spec.dynamics(z[..., :d], z[..., d:])
        return np.concatenate([G, F], axis=-1)

    return fd_jacobian(stacked, np.concatenate([x, p], axis=-1), step)


def check_strong_monotone(spec: ModelSpec, alpha: float, sampler: StateSampler,
                          n_samples: int = DEFAULT_N_SAMPLES, tol: float = TOL_SAMPLED,
                          step: float = JACOBIAN_STEP) -> HypothesisReport:
    """
    Strong monotonicity of (G, F) and of U0 through finite-difference Jacobians.

    The block matrix [[D_xG, D_pG], [D_xF, D_pF]] (Jacobian rows (G, F),
    columns (x, p)) is symmetrised and compared with alpha*diag(Id, 0).
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}", module="model_core")
    d = spec.d
    x = sampler.simplex_points(n_samples)
    p = sampler.values(n_samples)
    J = _coupling_jacobian(spec, x, p, step)
    sym = 0.5 * (J + np.swapaxes(J, -1, -2))
    sym[:, np.arange(d), np.arange(d)] -= alpha
    block_min = np.linalg.eigvalsh(sym)[:, 0]

    u0_min = None
    if spec.U0 is not None:
        J0 = fd_jacobian(spec.initial, x, step)
        form = 0.5 * (J0 + np.swapaxes(J0, -1, -2)) - alpha * np.einsum("nki,nkj->nij", J0, J0)
        u0_min = np.linalg.eigvalsh(form)[:, 0]

    margins = block_min if u0_min is None else np.minimum(block_min, u0_min)

    def witness(i):
        clause = "U0" if u0_min is not None and u0_min[i] < block_min[i] else "coupling"
        return {"clause": clause, "x": x[i].tolist(), "p": p[i].tolist(), "eigenvalue": float(margins[i])}

    report = _report("strong_monotone", margins, witness, tol, n_samples)
    report.details["alpha"] = alpha
    return report


def sampled_lipschitz(spec: ModelSpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
                      step: float = JACOBIAN_STEP) -> Dict[str, float]:
    """Sampled sup of ||D_xF||_2 and ||D_xG||_2 over B_R^1 x value box."""
    d = spec.d
    x = sampler.simplex_points(n_samples)
    p = sampler.values(n_samples)
    J = _coupling_jacobian(spec, x, p, step)
    dxG = np.linalg.norm(J[:, :d, :d], ord=2, axis=(1, 2))
    dxF = np.linalg.norm(J[:, d:, :d], ord=2, axis=(1, 2))
    return {"dxF": float(dxF.max()), "dxG": float(dxG.max())}


def check_discount(spec: ModelSpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
                   tol: float = TOL_SAMPLED, step: float = JACOBIAN_STEP) -> HypothesisReport:
    """The discount must dominate the operator norm of D_xF."""
    if spec.r is None:
        raise UnsupportedModeError("discount check needs a stationary spec with r", module="model_core")
    d = spec.d
    x = sampler.simplex_points(n_samples)
    p = sampler.values(n_samples)

    def flux(z):
        F, _ = spec.dynamics(z, p)
        return F

    norms = np.linalg.norm(fd_jacobian(flux, x, step), ord=2, axis=(1, 2))
    # strict inequality: margin r - ||D_xF|| - tol must be positive
    margins = spec.r - norms - tol

    def witness(i):
        return {"x": x[i].tolist(), "p": p[i].tolist(), "norm": float(norms[i]), "r": spec.r}

    report = _report("discount", margins, witness, 0.0, n_samples)
    if report.margin <= 0 and report.passed:
        report.verdict = "fail"
        report.witness = witness(_worst(margins))
    report.details["sup_norm"] = float(norms.max())
    return report


@dataclass
class ZeroMassSolution:
    V: np.ndarray
    residual: float
    in_orthant: bool
    iterations: int


def solve_zero_mass(spec: ModelSpec, tol: float = TOL_ALGEBRAIC, max_iter: int = 100,
                    sampler: Optional[StateSampler] = None) -> ZeroMassSolution:
    """
    Solve rV + lambda(V - T*V) + G(0, -V) = 0 by damped Newton.

    Args:
        spec: Stationary model (r required)
        tol: Sup-norm residual target
        max_iter: Newton iteration cap

    Returns:
        ZeroMassSolution with V and whether V lies in the orthant

    Raises:
        HypothesisError: if F(0, p) != 0 for a sampled p
        NonConvergenceError: if the residual stays above tol
    """
    if spec.r is None:
        raise UnsupportedModeError("zero-mass solve needs a stationary spec with r", module="model_core")
    d = spec.d
    sampler = sampler or StateSampler(d, spec.R)
    p = sampler.values(64)
    F0, _ = spec.dynamics(np.zeros((64, d)), p)
    if np.max(np.abs(F0)) > TOL_SAMPLED:
        i = int(np.argmax(np.abs(F0).max(axis=-1)))
        raise HypothesisError("F(0, p) must vanish for the zero-mass problem", module="model_core",
                              witness={"p": p[i].tolist(), "F": F0[i].tolist()})

    zero = np.zeros(d)

    def residual(V):
        _, G = spec.dynamics(zero, -V)
        return spec.r * V + spec.lam * (V - spec.T.T @ V) + G

    V = np.zeros(d)
    res = residual(V)
    norm = float(np.max(np.abs(res)))
    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            break
        J = fd_jacobian(residual, V)
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -res, rcond=None)[0]
        damping = 1.0
        for _ in range(30):
            trial = V + damping * step
            trial_res = residual(trial)
            trial_norm = float(np.max(np.abs(trial_res)))
            if trial_norm < norm:
                break
            damping *= 0.5
        V, res, norm = trial, trial_res, trial_norm
    if norm > tol:
        raise NonConvergenceError(f"zero-mass solve stalled at residual {norm:.3e}", module="model_core",
                                  witness={"V": V.tolist(), "residual": norm})
    in_orthant = bool(np.all(V >= -tol))
    logger.info(f"✅ Zero-mass value {V} (residual {norm:.2e}, in orthant: {in_orthant})")
    return ZeroMassSolution(V, norm, in_orthant, iteration)
