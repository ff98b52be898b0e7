#!/usr/bin/env python3
"""
Built-in model families.

- appendix-b (alias quadratic-hamiltonian): quadratic-Hamiltonian orthant model with its simplex reduction
- entry-exit: one-dimensional market game with entry cost b and exit value s
- linear-test: G = Ax + Bp + c, F = -kappa*x fixtures

Families are selected by name from a run config through build_model().
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from config import (
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    MAX_WORKERS,
    SOLVER_TOL,
    STAGNATION_WINDOW,
    STEGALL_DELTA,
    TOL_ALGEBRAIC,
    TOL_SAMPLED,
)
from grid_solver import Grid, GridField, build_grid, gradient
from model_core import (
    ConfigError,
    DomainError,
    HypothesisReport,
    ModelSpec,
    StateSampler,
    fd_jacobian,
)
from monotone_verify import (
    VerificationReport,
    _aggregate,
    _clause,
    _failed_constraint,
    _run_samples,
    stegall_perturb,
)
from stopping import ContinuationCertificate, StoppingConfig, solve_penalized_stationary

logger = logging.getLogger(__name__)

ScalarMap = Callable[[np.ndarray], np.ndarray]


def _identity(x: np.ndarray) -> np.ndarray:
    return np.array(x, dtype=float)


def quadratic_hamiltonian(scale: float = 1.0) -> Tuple[ScalarMap, ScalarMap]:
    """H(q) = scale * q^2 / 2 and its derivative."""
    return (lambda q: 0.5 * scale * np.asarray(q) ** 2), (lambda q: scale * np.asarray(q))


@dataclass
class QuadraticFamilySpec:
    """
    Orthant model G_i(x, p) = f_i(x) - sum_{j != i} H((p_j - p_i)_-) with (q)_- = max(-q, 0).

    Args:
        d: Number of states (>= 2 for the reduction)
        f: Monotone cost map x -> d-vector, vectorised over leading axes
        H: Convex scalar function on [0, inf) with H(0) = 0
        dH: Derivative of H
        r: Optional discount rate for stationary use
        U0: Initial value map; defaults to the identity
    """

    d: int
    f: Callable[[np.ndarray], np.ndarray] = field(default_factory=lambda: _identity)
    H: ScalarMap = field(default_factory=lambda: quadratic_hamiltonian()[0])
    dH: ScalarMap = field(default_factory=lambda: quadratic_hamiltonian()[1])
    r: Optional[float] = None
    U0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    R: float = 1.0

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError(f"quadratic-Hamiltonian model needs d >= 2, got {self.d}", module="models")
        if abs(float(self.H(np.array(0.0)))) > TOL_ALGEBRAIC:
            raise ConfigError("H(0) must vanish", module="models")
        q = np.linspace(0.0, 10.0, 201)
        slopes = np.asarray(self.dH(q), dtype=float)
        if np.any(np.diff(slopes) < -TOL_ALGEBRAIC):
            raise ConfigError("H must be convex on [0, inf) (dH nondecreasing)", module="models")
        rng = np.random.default_rng(DEFAULT_SEED)
        x = rng.dirichlet(np.ones(self.d + 1), size=256)[:, : self.d] * self.R
        y = rng.dirichlet(np.ones(self.d + 1), size=256)[:, : self.d] * self.R
        pair = np.einsum("ni,ni->n", np.asarray(self.f(x)) - np.asarray(self.f(y)), x - y)
        if pair.min() < -TOL_SAMPLED:
            raise ConfigError("cost map f is not monotone on sampled pairs", module="models",
                              witness={"x": x[int(np.argmin(pair))].tolist(), "y": y[int(np.argmin(pair))].tolist()})
        if self.U0 is None:
            self.U0 = _identity


def _negative_parts(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Q[..., i, j] = p_j - p_i
    Q = p[..., None, :] - p[..., :, None]
    return Q, np.maximum(-Q, 0.0)


def quadratic_flux_jacobian(spec: QuadraticFamilySpec, p: np.ndarray) -> np.ndarray:
    """Analytic D_pG[..., i, j]; at ties the inactive one-sided derivative (0) is taken."""
    p = np.asarray(p, dtype=float)
    Q, m = _negative_parts(p)
    off = np.where(Q < 0, np.asarray(spec.dH(m), dtype=float), 0.0)
    idx = np.arange(spec.d)
    off[..., idx, idx] = 0.0
    J = off.copy()
    J[..., idx, idx] = -off.sum(axis=-1)
    return J


def quadratic_family_model(spec: QuadraticFamilySpec) -> ModelSpec:
    """ModelSpec with G from the quadratic-Hamiltonian family and F = -(D_pG)^T x, lambda = 0."""
    idx = np.arange(spec.d)

    def G(x, p):
        p = np.asarray(p, dtype=float)
        _, m = _negative_parts(p)
        Hm = np.asarray(spec.H(m), dtype=float)
        Hm[..., idx, idx] = 0.0
        return np.asarray(spec.f(x), dtype=float) - Hm.sum(axis=-1)

    def F(x, p):
        x = np.asarray(x, dtype=float)
        J = quadratic_flux_jacobian(spec, np.broadcast_to(p, np.broadcast_shapes(np.shape(x), np.shape(p))))
        return -np.einsum("...ji,...j->...i", J, x)

    return ModelSpec(d=spec.d, F=F, G=G, lam=0.0, T=np.eye(spec.d), r=spec.r, U0=spec.U0, R=spec.R,
                     name="quadratic-hamiltonian")


def _off_kink(p: np.ndarray, gap: float) -> np.ndarray:
    Q = np.abs(p[:, None, :] - p[:, :, None])
    Q[:, np.arange(p.shape[1]), np.arange(p.shape[1])] = np.inf
    return Q.min(axis=(1, 2)) > gap


def mass_conservation(model: ModelSpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
                      rel_tol: float = 1e-10) -> HypothesisReport:
    """Sampled check that the components of F sum to zero."""
    x = sampler.simplex_points(n_samples)
    p = sampler.values(n_samples)
    F, _ = model.dynamics(x, p)
    total = np.abs(F.sum(axis=-1))
    allowed = rel_tol * (1.0 + np.abs(F).max(axis=-1))
    margins = allowed - total
    worst = int(np.argmin(margins))
    if margins[worst] < 0:
        logger.warning(f"⚠️ mass not conserved: |sum F| = {total[worst]:.3e}")
        return HypothesisReport("mass_conservation", "fail", float(margins[worst]),
                                {"x": x[worst].tolist(), "p": p[worst].tolist(), "sum": float(total[worst])},
                                n_samples, rel_tol)
    return HypothesisReport("mass_conservation", "pass(sampled)", float(margins[worst]), None, n_samples, rel_tol,
                            {"max_abs_sum": float(total.max())})


def compare_flux_jacobian(spec: QuadraticFamilySpec, sampler: StateSampler, n_samples: int = DEFAULT_N_SAMPLES,
                          tol: float = 1e-7) -> HypothesisReport:
    """Analytic adjoint flux against -(finite-difference D_pG)^T x, away from kinks."""
    model = quadratic_family_model(spec)
    x = sampler.simplex_points(n_samples)
    p = sampler.values(n_samples)
    keep = _off_kink(p, 1e-3 * (1.0 + np.abs(p).max(axis=1)))
    x, p = x[keep], p[keep]
    F, _ = model.dynamics(x, p)
    J = fd_jacobian(lambda q: model.dynamics(x, q)[1], p)
    F_fd = -np.einsum("nji,nj->ni", J, x)
    error = np.abs(F - F_fd).max(axis=1) / (1.0 + np.abs(F).max(axis=1))
    margins = tol - error
    worst = int(np.argmin(margins)) if len(margins) else 0
    verdict = "pass(sampled)" if not len(margins) or margins[worst] >= 0 else "fail"
    witness = None
    if verdict == "fail":
        witness = {"x": x[worst].tolist(), "p": p[worst].tolist(), "analytic": F[worst].tolist(),
                   "finite_difference": F_fd[worst].tolist()}
    return HypothesisReport("flux_jacobian", verdict, float(margins[worst]) if len(margins) else tol, witness,
                            int(keep.sum()), tol, {"skipped_near_kinks": int((~keep).sum())})


def _simplex_lift(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.concatenate([z, 1.0 - z.sum(axis=-1, keepdims=True)], axis=-1)


def _pad_values(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    return np.concatenate([V, np.zeros(V.shape[:-1] + (1,))], axis=-1)


def reduced_model(spec: QuadraticFamilySpec) -> ModelSpec:
    """
    Reduced system on the simplex {z >= 0, sum z <= 1}:

        G~^i(z, V) = G^i(phi(z), psi(V)) - G^d(phi(z), psi(V))
        F~^i(z, V) = F^i(phi(z), psi(V))

    with phi(z) = (z, 1 - sum z) and psi(V) = (V, 0).
    """
    full = quadratic_family_model(spec)
    d = spec.d

    def G(z, V):
        _, Gx = full.dynamics(_simplex_lift(z), _pad_values(V))
        return Gx[..., : d - 1] - Gx[..., d - 1:]

    def F(z, V):
        Fx, _ = full.dynamics(_simplex_lift(z), _pad_values(V))
        return Fx[..., : d - 1]

    def U0(z):
        U = np.asarray(full.initial(_simplex_lift(z)))
        return U[..., : d - 1] - U[..., d - 1:]

    return ModelSpec(d=d - 1, F=F, G=G, lam=0.0, r=spec.r, U0=U0, R=1.0, name="quadratic-hamiltonian-reduced")


def reduce_field(field_: GridField) -> GridField:
    """
    Tabulate V_i(t, z) = U_i(t, phi(z)) - U_d(t, phi(z)) on a (d-1)-dimensional simplex grid.

    The reduced grid has radius 1 and the source grid's spacing.

    Raises:
        DomainError: if the slice sum x = 1 leaves the source grid
    """
    d = field_.grid.d
    if d < 2:
        raise ConfigError("reduction needs d >= 2", module="models")
    if field_.grid.R < 1.0 - TOL_ALGEBRAIC:
        raise DomainError(f"simplex slice sum x = 1 lies outside the grid (R = {field_.grid.R})",
                          module="models", witness={"R": field_.grid.R})
    reduced_grid = build_grid(d - 1, 1.0, field_.grid.h)
    points = _simplex_lift(reduced_grid.coords)
    P = field_.grid.interpolation_matrix(points)
    values = np.stack([P @ field_.values[s] for s in range(field_.n_slices)])
    reduced = values[..., : d - 1] - values[..., d - 1:]
    logger.info(f"📉 reduced field to d={d - 1}: {reduced_grid.size} nodes, {field_.n_slices} slices")
    return GridField(reduced_grid, field_.times, reduced, dict(field_.meta, reduced_from=d))


@dataclass
class EntryExitSpec:
    """
    Entry/exit market game in the aggregate capacity K >= 0.

    Args:
        g: Increasing Lipschitz revenue map K -> real (vectorised)
        b: Entry cost
        s: Exit value (b < s)
        r: Discount rate
        R_K: Capacity radius of the grid; defaults to the largest K with g(K) <= 2rs
        lipschitz_g: Lipschitz constant of g; estimated on [0, R_K] if omitted
        require_increasing: Set False to allow flat revenue maps
    """

    g: ScalarMap
    b: float
    s: float
    r: float
    R_K: Optional[float] = None
    lipschitz_g: Optional[float] = None
    require_increasing: bool = True

    def __post_init__(self):
        if not self.b < self.s:
            raise ConfigError(f"entry cost must be below exit value, got b={self.b}, s={self.s}", module="models")
        if self.r <= 0:
            raise ConfigError(f"discount r must be > 0, got {self.r}", module="models")
        if self.R_K is None:
            self.R_K = self._default_radius()
        K = np.linspace(0.0, self.R_K, 513)
        values = np.asarray(self.g(K), dtype=float)
        steps = np.diff(values)
        if self.require_increasing and np.any(steps <= 0):
            i = int(np.argmin(steps))
            raise ConfigError("revenue map g is not increasing on sampled capacities", module="models",
                              witness={"K": [float(K[i]), float(K[i + 1])]})
        if self.lipschitz_g is None:
            self.lipschitz_g = float(np.max(np.abs(steps)) / (K[1] - K[0]))

    def _default_radius(self) -> float:
        level = 2.0 * self.r * self.s

        def excess(K):
            return float(self.g(np.array(K))) - level

        if excess(0.0) > 0:
            logger.warning("⚠️ g(0) already exceeds 2rs; using capacity radius 1")
            return 1.0
        upper = 1.0
        while excess(upper) <= 0:
            upper *= 2.0
            if upper > 2.0 ** 40:
                raise ConfigError("g never reaches 2rs; set R_K explicitly", module="models")
        return float(brentq(excess, 0.0, upper))


def entry_exit_model(ee: EntryExitSpec, eps: float, R: Optional[float] = None) -> ModelSpec:
    """
    One-dimensional spec whose penalized stopping solve with upper obstacle s is

        rU + (beta'(U - s)K - beta(b - U)) d_K U / eps + beta(U - s) / eps = g(K).

    F carries the entry transport -(b - U)_+/eps; the exit terms come from the
    stopping scheme.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}", module="models")
    b = ee.b

    def F(K, U):
        return -np.maximum(b - np.asarray(U, dtype=float), 0.0) / eps + 0.0 * np.asarray(K)

    def G(K, U):
        return np.asarray(ee.g(np.asarray(K, dtype=float)), dtype=float) + 0.0 * np.asarray(U)

    return ModelSpec(d=1, F=F, G=G, r=ee.r, R=R if R is not None else ee.R_K, name=f"entry-exit(eps={eps:g})")


def entry_exit_grid(ee: EntryExitSpec, h: float) -> Grid:
    """Capacity grid on [0, R_K] with R_K rounded up to a multiple of h."""
    R = math.ceil(ee.R_K / h - 1e-9) * h
    return build_grid(1, R, h)


def solve_entry_exit(ee: EntryExitSpec, grid: Grid, config: StoppingConfig, tol: float = SOLVER_TOL,
                     seed: int = DEFAULT_SEED, window: int = STAGNATION_WINDOW) -> GridField:
    """
    eps-continuation of the penalized entry/exit equation.

    Each level warm-starts from the previous one. meta carries the per-level
    certificates and the gradient bound Lip(g)/r.
    """
    U = None
    certificates: List[ContinuationCertificate] = []
    field_ = None
    for eps in config.eps_schedule:
        model = entry_exit_model(ee, eps, R=grid.R)
        # the entry transport points out of [0, R] where U < b; the refusal is overridden
        field_ = solve_penalized_stationary(model, grid, eps, tol, config.beta_prime_at_zero, upper=ee.s,
                                            U_init=U, force=True, seed=seed, window=window)
        U = field_.slice(0)
        _, grad_norm = gradient(field_)
        certificates.append(ContinuationCertificate(
            eps=eps,
            max_positive_part=float(np.max(np.maximum(U - ee.s, 0.0))),
            grad_norm=grad_norm,
            residual=float(field_.meta["residual"]),
            max_lower_violation=float(np.max(np.maximum(ee.b - U, 0.0))),
        ))
        logger.info(f"📊 entry-exit eps={eps:g}: max(U-s)+={certificates[-1].max_positive_part:.3e} "
                    f"max(b-U)+={certificates[-1].max_lower_violation:.3e} |DU|={grad_norm:.3f}")
    bound = ee.lipschitz_g / ee.r
    grad_final = certificates[-1].grad_norm
    field_.meta.update({
        "certificates": [c.to_dict() for c in certificates],
        "eps_last": config.eps_schedule[-1],
        "gradient_bound": {"bound": bound, "grad_norm": grad_final, "holds": grad_final <= bound + TOL_SAMPLED},
    })
    if grad_final > bound + TOL_SAMPLED:
        logger.warning(f"⚠️ |D_K U| = {grad_final:.3f} exceeds Lip(g)/r = {bound:.3f}")
    return field_


def verify_entry_exit(field_: GridField, ee: EntryExitSpec, n_samples: int = DEFAULT_N_SAMPLES,
                      tol: float = TOL_SAMPLED, seed: int = DEFAULT_SEED, workers: int = MAX_WORKERS,
                      index: int = -1) -> VerificationReport:
    """
    Check b <= U <= s, then r U(K0)(K0 - y) >= g(K0)(K0 - y) at strict minima of
    (U(K) - V)(K - y) with V uniform in [b, s] and the Stegall shift kept in [b, s].
    """
    if field_.grid.d != 1:
        raise ConfigError(f"entry/exit verification needs a 1-D field, got d={field_.grid.d}", module="models")
    K = field_.grid.coords
    U = field_.slice(index)[:, 0]
    above = float(np.max(U - ee.s))
    below = float(np.max(ee.b - U))
    if above > tol or below > tol:
        node = int(np.argmax(U - ee.s)) if above >= below else int(np.argmax(ee.b - U))
        return _failed_constraint("entry-exit", "constraint", max(above, below),
                                  {"K": float(K[node, 0]), "U": float(U[node])}, tol, seed)
    gK = np.asarray(ee.g(K[:, 0]), dtype=float)
    delta = STEGALL_DELTA * max(ee.s - ee.b, 1.0)

    def sample(s_idx: int):
        rng = np.random.default_rng([seed, s_idx])
        V = float(rng.uniform(ee.b, ee.s))
        y_idx = int(rng.integers(field_.grid.size))
        y = float(K[y_idx, 0])
        objective = (U - V) * (K[:, 0] - y)
        pert = stegall_perturb(objective, K, delta, rng,
                               project=lambda a: np.clip(a, V - ee.s, V - ee.b))
        i = pert.minimizer
        gap = float(K[i, 0]) - y
        margin = ee.r * float(U[i]) * gap - float(gK[i]) * gap
        return margin, {"V": V, "y": y, "K0": float(K[i, 0]), "a": pert.a.tolist(), "strictness": pert.margin}

    results = _run_samples(sample, n_samples, workers)
    clauses = {"constraint": _clause(True, max(above, below))}
    return _aggregate("entry-exit", results, tol, seed, clauses)


def linear_test_model(d: int, A=None, B=None, c=None, kappa: float = 0.0, C0=None, u0=None,
                      r: Optional[float] = None, lam: float = 0.0, T=None, R: float = 1.0) -> ModelSpec:
    """G(x, p) = A x + B p + c, F(x, p) = -kappa x, U0(x) = C0 x + u0 (defaults A = C0 = I, B = c = u0 = 0)."""
    A = np.eye(d) if A is None else np.asarray(A, dtype=float)
    B = np.zeros((d, d)) if B is None else np.asarray(B, dtype=float)
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float)
    C0 = np.eye(d) if C0 is None else np.asarray(C0, dtype=float)
    u0 = np.zeros(d) if u0 is None else np.asarray(u0, dtype=float)
    for name, mat in (("A", A), ("B", B), ("C0", C0)):
        if mat.shape != (d, d):
            raise ConfigError(f"{name} must be {d}x{d}, got {mat.shape}", module="models")
    for name, vec in (("c", c), ("u0", u0)):
        if vec.shape != (d,):
            raise ConfigError(f"{name} must have {d} entries, got {vec.shape}", module="models")

    def G(x, p):
        return np.asarray(x) @ A.T + np.asarray(p) @ B.T + c

    def F(x, p):
        return -kappa * np.asarray(x, dtype=float) + 0.0 * np.asarray(p)

    def U0(x):
        return np.asarray(x) @ C0.T + u0

    return ModelSpec(d=d, F=F, G=G, lam=lam, T=T, r=r, U0=U0, R=R, name="linear-test")


def _affine_map(params: Optional[Dict[str, Any]], d: int) -> Callable[[np.ndarray], np.ndarray]:
    params = params or {}
    A = np.asarray(params.get("A", np.eye(d)), dtype=float)
    c = np.asarray(params.get("c", np.zeros(d)), dtype=float)
    return lambda x: np.asarray(x, dtype=float) @ A.T + c


def _revenue_map(params: Dict[str, Any]) -> ScalarMap:
    kind = params.get("kind", "linear")
    if kind == "linear":
        slope = float(params.get("slope", 1.0))
        intercept = float(params.get("intercept", 0.0))
        return lambda K: slope * np.asarray(K, dtype=float) + intercept
    if kind == "constant":
        value = float(params["value"])
        return lambda K: np.full(np.shape(K), value)
    if kind == "saturating":
        scale = float(params.get("scale", 1.0))
        cap = float(params.get("cap", 1.0))
        return lambda K: cap * (1.0 - np.exp(-np.asarray(K, dtype=float) / scale))
    raise ConfigError(f"unknown revenue map kind '{kind}'", module="models")


def _check_params(family: str, params: Dict[str, Any], known: set) -> None:
    unknown = set(params) - known
    if unknown:
        raise ConfigError(f"unknown {family} parameters: {sorted(unknown)}", module="models",
                          witness={"keys": sorted(unknown)})


def _build_quadratic_family(params: Dict[str, Any]) -> Tuple[ModelSpec, QuadraticFamilySpec]:
    _check_params("quadratic-family", params, {"d", "f", "hamiltonian_scale", "U0", "r", "R"})
    d = int(params.get("d", 2))
    H, dH = quadratic_hamiltonian(float(params.get("hamiltonian_scale", 1.0)))
    U0 = _affine_map(params["U0"], d) if "U0" in params else None
    family = QuadraticFamilySpec(d=d, f=_affine_map(params.get("f"), d), H=H, dH=dH, r=params.get("r"), U0=U0,
                                 R=float(params.get("R", 1.0)))
    return quadratic_family_model(family), family


def _build_entry_exit(params: Dict[str, Any]) -> Tuple[ModelSpec, EntryExitSpec]:
    _check_params("entry-exit", params, {"g", "b", "s", "r", "R_K", "lipschitz_g", "require_increasing", "eps"})
    ee = EntryExitSpec(g=_revenue_map(params.get("g", {})), b=float(params["b"]), s=float(params["s"]),
                       r=float(params["r"]), R_K=params.get("R_K"), lipschitz_g=params.get("lipschitz_g"),
                       require_increasing=bool(params.get("require_increasing", True)))
    return entry_exit_model(ee, float(params.get("eps", 1.0))), ee


def _build_linear_test(params: Dict[str, Any]) -> Tuple[ModelSpec, None]:
    _check_params("linear-test", params, {"d", "A", "B", "c", "kappa", "C0", "u0", "r", "lam", "T", "R"})
    return linear_test_model(**params), None


MODEL_FAMILIES: Dict[str, Callable[[Dict[str, Any]], Tuple[ModelSpec, Any]]] = {
    "appendix-b": _build_quadratic_family,
    "quadratic-hamiltonian": _build_quadratic_family,
    "entry-exit": _build_entry_exit,
    "linear-test": _build_linear_test,
}


def build_model(name: str, params: Optional[Dict[str, Any]] = None) -> Tuple[ModelSpec, Any]:
    """
    Build a registered model family.

    Returns:
        (ModelSpec, family record or None)
    """
    if name not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model '{name}' (known: {sorted(MODEL_FAMILIES)})", module="models")
    try:
        return MODEL_FAMILIES[name](dict(params or {}))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad parameters for model '{name}': {e}", module="models") from e
