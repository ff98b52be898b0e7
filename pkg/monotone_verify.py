#!/usr/bin/env python3
"""
Certification of tabulated value functions as monotone solutions.

For sampled (V, y) the objective x -> <U(x) - V, x - y> is minimised over the
grid nodes after a small Stegall shift V -> V - a that makes the minimum
strict; the defining inequality is then evaluated at the minimiser. Samples
are independent: sample s draws from numpy.random.default_rng([seed, s]) and
results are reduced in sample order, so reports do not depend on the worker
count. Samples whose minimiser sits on the outer face |x| = R with inward
flux are skipped and counted.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    LIPSCHITZ_DIRECTIONS,
    MAX_WORKERS,
    PAIR_COUNT_CAP,
    SINGULAR_COND,
    SOLVER_TOL,
    STEGALL_DELTA,
    STEGALL_HALVING_EVERY,
    STEGALL_MAX_DRAWS,
    STRICTNESS_THRESHOLD,
    TOL_ALGEBRAIC,
    TOL_SAMPLED,
)
from grid_solver import GridField, MasterEquationScheme, build_grid, equation_residual, gradient, solve_stationary
from impulse import check_hyp7, jump_operator, m_envelope
from model_core import (
    DegenerateObjectiveError,
    HypothesisError,
    HypothesisReport,
    ModelSpec,
    StateSampler,
    UnsupportedModeError,
    fd_jacobian,
    sampled_lipschitz,
)

logger = logging.getLogger(__name__)


@dataclass
class StegallPerturbation:
    a: np.ndarray
    minimizer: int
    margin: float
    draws: int
    delta: float


def stegall_perturb(objective: np.ndarray, points: np.ndarray, delta: float, seed=DEFAULT_SEED,
                    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                    max_draws: int = STEGALL_MAX_DRAWS, halving_every: int = STEGALL_HALVING_EVERY,
                    threshold: float = STRICTNESS_THRESHOLD) -> StegallPerturbation:
    """
    Add a linear term <a, x> so the node minimiser becomes strict.

    Args:
        objective: Values at the nodes, shape (N,)
        points: Node positions entering the linear term, shape (N, d)
        delta: Initial radius of the ball a is drawn from
        seed: Seed or numpy Generator
        project: Optional map applied to each draw (constraint-preserving shifts)

    Returns:
        StegallPerturbation with the strict minimiser and its margin

    Raises:
        DegenerateObjectiveError: after max_draws failures
    """
    objective = np.asarray(objective, dtype=float)
    points = np.asarray(points, dtype=float)
    if objective.size == 0 or not np.all(np.isfinite(objective)):
        raise DegenerateObjectiveError("objective must be finite on a nonempty node set",
                                       module="monotone_verify")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = points.shape[1]
    scale = max(1.0, float(np.max(np.abs(objective))))
    for draw in range(max_draws):
        radius = delta * 0.5 ** (draw // halving_every)
        direction = rng.normal(size=d)
        direction /= max(np.linalg.norm(direction), 1e-300)
        a = direction * radius * rng.random() ** (1.0 / d)
        if project is not None:
            a = project(a)
        perturbed = objective + points @ a
        if perturbed.size == 1:
            return StegallPerturbation(a, 0, scale, draw + 1, radius)
        two = np.argpartition(perturbed, 1)[:2]
        first, second = sorted(two, key=lambda i: perturbed[i])
        margin = float(perturbed[second] - perturbed[first])
        if margin > threshold * scale:
            return StegallPerturbation(a, int(first), margin, draw + 1, radius)
    raise DegenerateObjectiveError(f"no strict minimum after {max_draws} draws", module="monotone_verify",
                                   witness={"delta": delta, "scale": scale})


@dataclass
class VerificationReport:
    definition: str
    samples_attempted: int
    samples_valid: int
    worst_margin: float
    worst_witness: Optional[Dict[str, Any]]
    margin_min: float
    margin_median: float
    tolerance: float
    seed: int
    clauses: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    samples_skipped: int = 0
    reproduction: str = ""
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst_margin >= -self.tolerance and all(c["passed"] for c in self.clauses.values())

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "definition": self.definition,
            "verdict": self.verdict,
            "samples_attempted": self.samples_attempted,
            "samples_valid": self.samples_valid,
            "samples_skipped": self.samples_skipped,
            "worst_margin": self.worst_margin,
            "worst_witness": self.worst_witness,
            "margin_min": self.margin_min,
            "margin_median": self.margin_median,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "clauses": self.clauses,
            "reproduction": self.reproduction,
            "details": self.details,
        }


def _clause(passed: bool, value: float, witness: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {"passed": bool(passed), "value": float(value), "witness": witness}


def _run_samples(sample_fn: Callable[[int], Optional[Tuple[float, Dict[str, Any]]]], n_samples: int,
                 workers: int) -> List[Optional[Tuple[float, Dict[str, Any]]]]:
    results: List[Optional[Tuple[float, Dict[str, Any]]]] = [None] * n_samples
    if workers <= 1 or n_samples < 2:
        for s in range(n_samples):
            results[s] = sample_fn(s)
        return results

    def run_chunk(indices: Sequence[int]):
        return [(s, sample_fn(s)) for s in indices]

    chunks = [range(start, n_samples, workers) for start in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_chunk = {executor.submit(run_chunk, chunk): i for i, chunk in enumerate(chunks)}
        for future in as_completed(future_to_chunk):
            for s, outcome in future.result():
                results[s] = outcome
    return results


def _aggregate(definition: str, results, tol: float, seed: int,
               clauses: Dict[str, Dict[str, Any]]) -> VerificationReport:
    valid = [(s, r) for s, r in enumerate(results) if r is not None]
    skipped = len(results) - len(valid)
    if not valid:
        return VerificationReport(definition, len(results), 0, 0.0, None, 0.0, 0.0, tol, seed, clauses,
                                  samples_skipped=skipped)
    margins = np.array([r[0] for _, r in valid])
    worst = int(np.argmin(margins))
    s_worst, (m_worst, witness) = valid[worst]
    witness = dict(witness, sample=s_worst)
    report = VerificationReport(
        definition=definition, samples_attempted=len(results), samples_valid=len(valid),
        worst_margin=float(m_worst), worst_witness=witness,
        margin_min=float(margins.min()), margin_median=float(np.median(margins)),
        tolerance=tol, seed=seed, clauses=clauses, samples_skipped=skipped,
    )
    icon = "✅" if report.passed else "❌"
    logger.info(f"{icon} {definition}: worst margin {report.worst_margin:.3e} over {len(valid)} samples "
                f"(tol {tol:.2e})")
    return report


def _failed_constraint(definition: str, clause: str, value: float, witness: Dict[str, Any],
                       tol: float, seed: int) -> VerificationReport:
    logger.warning(f"❌ {definition}: {clause} clause fails ({value:.3e})")
    return VerificationReport(definition, 0, 0, -float(value), witness, -float(value), -float(value), tol, seed,
                              {clause: _clause(False, value, witness)})


class _SampleContext:
    def __init__(self, field_: GridField, spec: ModelSpec, index: int):
        """Read-only data shared by every sample of one slice."""
        self.field = field_
        self.spec = spec
        self.grid = field_.grid
        self.X = field_.grid.coords
        self.U = field_.slice(index)
        self.F, self.G = spec.dynamics(self.X, self.U)
        self.noise_image = None
        if spec.lam > 0:
            scheme = MasterEquationScheme(spec, field_.grid)
            self.noise_image = (scheme.noise_matrix @ self.U) @ spec.T
        lo = self.U.min(axis=0)
        hi = self.U.max(axis=0)
        spread = np.where(hi - lo > 0, hi - lo, 1.0)
        self.box = (lo - spread, hi + spread)
        self.delta = STEGALL_DELTA * float(spread.max())
        # minima on the outer face are artifacts of the truncation where the flux there points inward
        outer = np.zeros(self.grid.size, dtype=bool)
        outer[self.grid.face_idx] = True
        self.truncated = outer & (self.F.sum(axis=1) < 0)

    def noise_term(self, idx: int, direction: np.ndarray) -> float:
        if self.noise_image is None:
            return 0.0
        return self.spec.lam * float((self.U[idx] - self.noise_image[idx]) @ direction)

    def draw(self, rng: np.random.Generator, project_V) -> Tuple[np.ndarray, int]:
        V = rng.uniform(self.box[0], self.box[1])
        if project_V is not None:
            V = project_V(V)
        return V, int(rng.integers(self.grid.size))


def _stationary_samples(ctx: _SampleContext, seed: int, project_V=None, project_a=None):
    r = ctx.spec.r

    def sample(s: int):
        rng = np.random.default_rng([seed, s])
        V, y_idx = ctx.draw(rng, project_V)
        y = ctx.X[y_idx]
        objective = np.einsum("ni,ni->n", ctx.U - V, ctx.X - y)
        pert = stegall_perturb(objective, ctx.X, ctx.delta, rng,
                               project=None if project_a is None else (lambda a: project_a(V, a)))
        i = pert.minimizer
        if ctx.truncated[i]:
            return None
        x0, U0 = ctx.X[i], ctx.U[i]
        shifted = V - pert.a
        gap = x0 - y
        margin = (r * float(U0 @ gap) + ctx.noise_term(i, gap) - float(ctx.G[i] @ gap)
                  - float(ctx.F[i] @ (U0 - shifted)))
        return margin, {"V": V.tolist(), "y": y.tolist(), "x0": x0.tolist(), "a": pert.a.tolist(),
                        "strictness": pert.margin}

    return sample


def _require_stationary(field_: GridField, spec: ModelSpec) -> None:
    if spec.r is None:
        raise UnsupportedModeError("stationary verification needs a discount rate r", module="monotone_verify")
    if spec.d != field_.grid.d:
        raise UnsupportedModeError(f"field has d={field_.grid.d}, spec has d={spec.d}", module="monotone_verify")


def verify_stationary(field_: GridField, spec: ModelSpec, n_samples: int = DEFAULT_N_SAMPLES,
                      tol: float = TOL_SAMPLED, seed: int = DEFAULT_SEED, workers: int = MAX_WORKERS,
                      index: int = -1) -> VerificationReport:
    """
    Check r<U,x0-y> + lambda<U - T*U(Tx0), x0-y> >= <G, x0-y> + <F, U - V> at strict minima.

    Args:
        field_: Candidate value function (one slice is used)
        spec: Stationary model
        n_samples: Number of (V, y) draws
        tol: Allowed negative margin
        seed: Root seed; sample s uses default_rng([seed, s])
        workers: Thread count (results do not depend on it)

    Returns:
        VerificationReport
    """
    _require_stationary(field_, spec)
    ctx = _SampleContext(field_, spec, index)
    results = _run_samples(_stationary_samples(ctx, seed), n_samples, workers)
    return _aggregate("stationary", results, tol, seed, {})


def _initial_clause(field_: GridField, spec: ModelSpec, clip_at_zero: bool) -> Dict[str, Any]:
    U0 = spec.initial(field_.grid.coords)
    if clip_at_zero:
        U0 = np.minimum(U0, 0.0)
    diff = np.abs(field_.slice(0) - U0)
    worst = float(diff.max())
    node = int(np.unravel_index(np.argmax(diff), diff.shape)[0])
    allowed = TOL_ALGEBRAIC * max(1.0, float(np.abs(U0).max()))
    return _clause(worst <= allowed, worst,
                   None if worst <= allowed else {"x": field_.grid.coords[node].tolist(), "difference": worst})


def _td_samples(field_: GridField, spec: ModelSpec, seed: int, project_V=None, project_a=None):
    contexts: Dict[int, _SampleContext] = {}
    S = field_.n_slices
    for s0 in range(1, S):
        contexts[s0] = _SampleContext(field_, spec, s0)
    times = field_.times

    def sample(s: int):
        rng = np.random.default_rng([seed, s])
        s0 = int(rng.integers(1, S))
        ctx = contexts[s0]
        V, y_idx = ctx.draw(rng, project_V)
        y = ctx.X[y_idx]
        objective = np.einsum("ni,ni->n", ctx.U - V, ctx.X - y)
        pert = stegall_perturb(objective, ctx.X, ctx.delta, rng,
                               project=None if project_a is None else (lambda a: project_a(V, a)))
        i = pert.minimizer
        if ctx.truncated[i]:
            return None
        x0 = ctx.X[i]
        shifted = V - pert.a
        gap = x0 - y

        def u(k: int) -> float:
            return float((field_.values[k, i] - shifted) @ gap)

        dt = times[s0] - times[s0 - 1]
        slope = (u(s0) - u(s0 - 1)) / dt
        inflation = 0.0
        if s0 >= 2:
            inflation = abs(u(s0) - 2.0 * u(s0 - 1) + u(s0 - 2)) / dt
        margin = (slope + ctx.noise_term(i, gap) - float(ctx.F[i] @ (ctx.U[i] - shifted))
                  - float(ctx.G[i] @ gap))
        return margin + inflation, {"t0": float(times[s0]), "V": V.tolist(), "y": y.tolist(),
                                    "x0": x0.tolist(), "a": pert.a.tolist(), "raw_margin": margin,
                                    "inflation": inflation, "strictness": pert.margin}

    return sample


def verify_td(field_: GridField, spec: ModelSpec, n_samples: int = DEFAULT_N_SAMPLES, tol: float = TOL_SAMPLED,
              seed: int = DEFAULT_SEED, workers: int = MAX_WORKERS) -> VerificationReport:
    """
    Time-dependent verification with a backward-difference time slope.

    The slope of u(t) = <U(t,x0) - V, x0 - y> is taken between consecutive
    slices; the margin is credited with |second difference|/dt. Slice 0 must
    equal U0.
    """
    if field_.n_slices < 2:
        raise UnsupportedModeError("time-dependent verification needs at least 2 slices",
                                   module="monotone_verify")
    clauses = {"initial": _initial_clause(field_, spec, clip_at_zero=False)}
    results = _run_samples(_td_samples(field_, spec, seed), n_samples, workers)
    return _aggregate("td", results, tol, seed, clauses)


def verify_stopping(field_: GridField, spec: ModelSpec, n_samples: int = DEFAULT_N_SAMPLES,
                    tol: float = TOL_SAMPLED, seed: int = DEFAULT_SEED, td: bool = False,
                    workers: int = MAX_WORKERS, index: int = -1) -> VerificationReport:
    """Optimal-stopping verification: U <= 0, then the inequality for V <= 0 with V - a <= 0."""
    values = field_.values if td else field_.slice(index)[None]
    worst = float(values.max())
    if worst > tol:
        s, node, comp = np.unravel_index(np.argmax(values), values.shape)
        return _failed_constraint("stopping-td" if td else "stopping", "constraint", worst,
                                  {"x": field_.grid.coords[node].tolist(), "component": int(comp),
                                   "value": worst}, tol, seed)

    def project_V(V):
        return np.minimum(V, 0.0)

    def project_a(V, a):
        return np.maximum(a, V)

    clauses = {"constraint": _clause(True, worst)}
    if td:
        if field_.n_slices < 2:
            raise UnsupportedModeError("time-dependent verification needs at least 2 slices",
                                       module="monotone_verify")
        clauses["initial"] = _initial_clause(field_, spec, clip_at_zero=True)
        results = _run_samples(_td_samples(field_, spec, seed, project_V, project_a), n_samples, workers)
        return _aggregate("stopping-td", results, tol, seed, clauses)
    _require_stationary(field_, spec)
    ctx = _SampleContext(field_, spec, index)
    results = _run_samples(_stationary_samples(ctx, seed, project_V, project_a), n_samples, workers)
    return _aggregate("stopping", results, tol, seed, clauses)


def verify_impulse(field_: GridField, spec: ModelSpec, k: np.ndarray, n_samples: int = DEFAULT_N_SAMPLES,
                   tol: float = TOL_SAMPLED, seed: int = DEFAULT_SEED, workers: int = MAX_WORKERS,
                   index: int = -1) -> VerificationReport:
    """Impulse verification: U <= MU, then the inequality for V <= MV with V - a <= M(V - a)."""
    hyp7 = check_hyp7(k)
    if not hyp7.passed:
        raise HypothesisError("jump costs violate the acyclicity hypothesis", module="monotone_verify",
                              witness=hyp7.witness)
    _require_stationary(field_, spec)
    U = field_.slice(index)
    excess = U - jump_operator(k, U)
    worst = float(excess.max())
    if worst > tol:
        node, comp = np.unravel_index(np.argmax(excess), excess.shape)
        return _failed_constraint("impulse", "obstacle", worst,
                                  {"x": field_.grid.coords[node].tolist(), "component": int(comp),
                                   "excess": worst}, tol, seed)

    def project_V(V):
        return m_envelope(k, V)

    def project_a(V, a):
        return V - m_envelope(k, V - a)

    ctx = _SampleContext(field_, spec, index)
    results = _run_samples(_stationary_samples(ctx, seed, project_V, project_a), n_samples, workers)
    return _aggregate("impulse", results, tol, seed, {"obstacle": _clause(True, worst)})


def check_phi_admissible(spec: ModelSpec, phi: Callable, phi_jac: Optional[Callable], sampler: StateSampler,
                         n_samples: int = DEFAULT_N_SAMPLES, tol: float = TOL_SAMPLED) -> HypothesisReport:
    """Sampled check of the phi-weighted monotonicity of (G, F)."""
    jac = phi_jac or (lambda x: fd_jacobian(phi, x))
    x = sampler.simplex_points(n_samples)
    y = sampler.simplex_points(n_samples)
    U = sampler.values(n_samples)
    V = sampler.values(n_samples)
    Fx, Gx = spec.dynamics(x, U)
    Fy, Gy = spec.dynamics(y, V)
    weighted_U = np.einsum("nik,ni->nk", jac(x), U)
    weighted_V = np.einsum("nik,ni->nk", jac(y), V)
    margins = (np.einsum("ni,ni->n", Gx - Gy, phi(x) - phi(y))
               + np.einsum("ni,ni->n", Fx - Fy, weighted_U - weighted_V))
    worst = int(np.argmin(margins))
    verdict = "fail" if margins[worst] < -tol else "pass(sampled)"
    witness = None
    if verdict == "fail":
        witness = {"x": x[worst].tolist(), "y": y[worst].tolist(), "U": U[worst].tolist(), "V": V[worst].tolist()}
    return HypothesisReport("phi_admissible", verdict, float(margins[worst]), witness, n_samples, tol)


def verify_phi_monotone(field_: GridField, spec: ModelSpec, phi: Callable, phi_jac: Optional[Callable] = None,
                        n_samples: int = DEFAULT_N_SAMPLES, tol: float = TOL_SAMPLED, seed: int = DEFAULT_SEED,
                        workers: int = MAX_WORKERS, index: int = -1) -> VerificationReport:
    """
    phi-monotone verification: strict minima of <U(x) - V, phi(x) - y> with y in phi(grid).

    The margin is r<U, phi(x0)-y> + lambda<U - T*U(Tx0), phi(x0)-y>
    - <G, phi(x0)-y> - <F, Dphi(x0)^T (U - V)>. Samples whose minimiser has a
    singular Jacobian are skipped.
    """
    _require_stationary(field_, spec)
    jac = phi_jac or (lambda x: fd_jacobian(phi, x))
    admissible = check_phi_admissible(spec, phi, phi_jac, StateSampler(spec.d, field_.grid.R, seed), tol=tol)
    ctx = _SampleContext(field_, spec, index)
    Phi = np.asarray(phi(ctx.X), dtype=float)
    J = np.asarray(jac(ctx.X), dtype=float)
    cond = np.linalg.cond(J)
    r = spec.r

    def sample(s: int):
        rng = np.random.default_rng([seed, s])
        V, y_idx = ctx.draw(rng, None)
        y = Phi[y_idx]
        objective = np.einsum("ni,ni->n", ctx.U - V, Phi - y)
        pert = stegall_perturb(objective, Phi, ctx.delta, rng)
        i = pert.minimizer
        if ctx.truncated[i]:
            return None
        if not np.isfinite(cond[i]) or cond[i] > SINGULAR_COND:
            return None
        shifted = V - pert.a
        gap = Phi[i] - y
        U0 = ctx.U[i]
        margin = (r * float(U0 @ gap) + ctx.noise_term(i, gap) - float(ctx.G[i] @ gap)
                  - float(ctx.F[i] @ (J[i].T @ (U0 - shifted))))
        return margin, {"V": V.tolist(), "y": y.tolist(), "x0": ctx.X[i].tolist(), "a": pert.a.tolist(),
                        "strictness": pert.margin}

    results = _run_samples(sample, n_samples, workers)
    report = _aggregate("phi-monotone", results, tol, seed, {})
    report.details["phi_admissible"] = admissible.to_dict()
    return report


@dataclass
class MonitorResult:
    min_value: float
    witness: Dict[str, Any]
    exhaustive: bool
    pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return {"min_value": self.min_value, "witness": self.witness, "exhaustive": self.exhaustive,
                "pairs": self.pairs}


def _pair_minimum(X: np.ndarray, U1: np.ndarray, U2: np.ndarray, pair_cap: int, seed: int) -> MonitorResult:
    N = len(X)
    if N * N <= pair_cap:
        best = (np.inf, 0, 0)
        rows_per_chunk = max(1, 2_000_000 // max(N, 1))
        for start in range(0, N, rows_per_chunk):
            stop = min(N, start + rows_per_chunk)
            W = np.einsum("abi,abi->ab", U1[start:stop, None, :] - U2[None, :, :],
                          X[start:stop, None, :] - X[None, :, :])
            flat = int(np.argmin(W))
            a, b = divmod(flat, N)
            if W[a, b] < best[0]:
                best = (float(W[a, b]), start + a, b)
        value, i, j = best
        exhaustive, pairs = True, N * N
    else:
        rng = np.random.default_rng(seed)
        i_all = rng.integers(N, size=pair_cap)
        j_all = rng.integers(N, size=pair_cap)
        W = np.einsum("ni,ni->n", U1[i_all] - U2[j_all], X[i_all] - X[j_all])
        k = int(np.argmin(W))
        value, i, j = float(W[k]), int(i_all[k]), int(j_all[k])
        exhaustive, pairs = False, pair_cap
        logger.warning(f"⚠️ monitor subsampled {pair_cap} of {N * N} pairs")
    return MonitorResult(value, {"x": X[i].tolist(), "y": X[j].tolist()}, exhaustive, pairs)


def monotonicity_monitor(field_: GridField, index: int = -1, pair_cap: int = PAIR_COUNT_CAP,
                         seed: int = DEFAULT_SEED) -> MonitorResult:
    """Min over node pairs of <U(x) - U(y), x - y>."""
    U = field_.slice(index)
    return _pair_minimum(field_.grid.coords, U, U, pair_cap, seed)


def cross_monotonicity(field_a: GridField, field_b: GridField, index_a: int = -1, index_b: int = -1,
                       pair_cap: int = PAIR_COUNT_CAP, seed: int = DEFAULT_SEED) -> MonitorResult:
    """Min over pairs of <U_a(x) - U_b(y), x - y>, with U_b read on field_a's nodes."""
    X = field_a.grid.coords
    Ub = field_b.interpolate(X, index_b)
    return _pair_minimum(X, field_a.slice(index_a), Ub, pair_cap, seed)


@dataclass
class LipschitzCertificate:
    beta: float
    min_Z: float
    bound: float
    certified: bool
    gradient_norm: float

    def to_dict(self) -> Dict[str, Any]:
        return {"beta": self.beta, "min_Z": self.min_Z, "bound": self.bound,
                "certified": self.certified, "gradient_norm": self.gradient_norm}


def lipschitz_certificate(field_: GridField, index: int = -1, alpha: float = 1.0, t: float = 0.0,
                          spec: Optional[ModelSpec] = None, n_directions: int = LIPSCHITZ_DIRECTIONS,
                          seed: int = DEFAULT_SEED, tol: float = TOL_ALGEBRAIC) -> LipschitzCertificate:
    """
    Bernstein-type gradient certificate.

    Z = <xi, D_hU xi> - beta |D_hU^T xi|^2 over nodes and seeded unit xi with
    beta = alpha * exp(-t (2|D_xF| + 2|D_xG| + lambda (|T| - 1)_+)); min Z >= 0
    certifies |D_hU| <= 1/beta.
    """
    rate = 0.0
    if spec is not None and t > 0:
        lip = sampled_lipschitz(spec, StateSampler(spec.d, field_.grid.R, seed))
        rate = 2.0 * lip["dxF"] + 2.0 * lip["dxG"] + spec.lam * max(np.linalg.norm(spec.T, 2) - 1.0, 0.0)
    beta = alpha * float(np.exp(-t * rate))
    D, norm = gradient(field_, index)
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=(n_directions, field_.grid.d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    quad = np.einsum("si,nik,sk->ns", xi, D, xi)
    grad_w = np.einsum("nik,si->nsk", D, xi)
    Z = quad - beta * np.einsum("nsk,nsk->ns", grad_w, grad_w)
    min_Z = float(Z.min())
    return LipschitzCertificate(beta, min_Z, 1.0 / beta, min_Z >= -tol, norm)


@dataclass
class ConsistencyReport:
    positive_definite_nodes: int
    nodes: int
    interior_residual: float
    face_violation: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"positive_definite_nodes": self.positive_definite_nodes, "nodes": self.nodes,
                "interior_residual": self.interior_residual, "face_violation": self.face_violation,
                "passed": self.passed}


def consistency_check(field_: GridField, spec: ModelSpec, tol: float, index: int = -1) -> ConsistencyReport:
    """
    Pointwise check of the stationary equation on a field with positive definite D_hU.

    Where x_i > 0 the residual of component i must be within tol; where x_i = 0
    only rU^i + (F.grad)U^i + noise <= G^i + tol is required.
    """
    D, _ = gradient(field_, index)
    sym = 0.5 * (D + np.swapaxes(D, 1, 2))
    posdef = np.linalg.eigvalsh(sym)[:, 0] > 0
    res = equation_residual(field_, spec, index)
    X = field_.grid.coords
    interior = (X > 0) & posdef[:, None]
    face = (X == 0) & posdef[:, None]
    interior_residual = float(np.abs(res[interior]).max()) if np.any(interior) else 0.0
    face_violation = float(np.maximum(-res[face], 0.0).max()) if np.any(face) else 0.0
    passed = interior_residual <= tol and face_violation <= tol
    return ConsistencyReport(int(posdef.sum()), field_.grid.size, interior_residual, face_violation, passed)


def stability_sweep(spec: ModelSpec, d: int, R: float, h: float, levels: Sequence[int] = (4, 8, 16),
                    tol: float = SOLVER_TOL, force: bool = False, seed: int = DEFAULT_SEED) -> Dict[str, Any]:
    """Solve with G + x/n for each n and report sup distances to the unperturbed solve."""
    grid = build_grid(d, R, h)
    base = solve_stationary(spec, grid, tol, force=force, seed=seed)
    distances = {}
    for n in levels:
        G = spec.G
        perturbed = spec.with_drift(lambda x, p, G=G, n=n: G(x, p) + np.asarray(x) / n, name=f"{spec.name}+x/{n}")
        solved = solve_stationary(perturbed, grid, tol, force=force, seed=seed, U_init=base.slice())
        distances[n] = float(np.max(np.abs(solved.slice() - base.slice())))
        logger.info(f"📊 stability: n={n} sup distance {distances[n]:.3e}")
    ordered = [distances[n] for n in levels]
    return {"distances": distances, "decreasing": all(b <= a for a, b in zip(ordered, ordered[1:])),
            "base": base}
