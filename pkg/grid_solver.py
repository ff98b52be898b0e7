#!/usr/bin/env python3
"""
Finite-difference solver for the master equation on the truncated orthant B_R^1.

Nodes are the points h*k with k a nonnegative integer vector and sum(k) <= R/h,
stored in lexicographic order. Transport is first-order upwind; at the simplex
face the flux is split into tangential pairs so no stencil reads outside B_R^1.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import Delaunay

from config import (
    CFL_NUMBER,
    DEFAULT_SEED,
    INTERPOLATION_TOL,
    MAX_GRID_NODES,
    MAX_PSEUDO_STEPS,
    PARABOLIC_CFL,
    PRECHECK_SAMPLES,
    SOLVER_TOL,
    STAGNATION_WINDOW,
)
from model_core import (
    BlowUpError,
    CFLViolationError,
    ConfigError,
    DomainError,
    GridCapacityError,
    HypothesisError,
    ModelSpec,
    NonConvergenceError,
    StateSampler,
    check_hyp1,
    check_hyp2,
)

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"MFGF"


@lru_cache(maxsize=32)
def _lattice(d: int, n: int) -> np.ndarray:
    if d == 1:
        return np.arange(n + 1, dtype=np.int64)[:, None]
    blocks = []
    for a in range(n + 1):
        sub = _lattice(d - 1, n - a)
        blocks.append(np.column_stack([np.full(len(sub), a, dtype=np.int64), sub]))
    return np.vstack(blocks)


class Grid:
    def __init__(self, d: int, R: float, h: float, n: int):
        """
        Simplex lattice with neighbour tables.

        Args:
            d: State count
            R: Mass radius
            h: Spacing (R = n*h)
            n: Lattice steps along an axis
        """
        self.d = d
        self.R = R
        self.h = h
        self.n = n
        self.nodes = np.array(_lattice(d, n))
        self.coords = self.nodes * h
        self._base = (n + 1) ** np.arange(d - 1, -1, -1, dtype=np.int64)
        self.keys = self.nodes @ self._base
        eye = np.eye(d, dtype=np.int64)
        self.plus = np.stack([self.index_of(self.nodes + eye[k]) for k in range(d)])
        self.minus = np.stack([self.index_of(self.nodes - eye[k]) for k in range(d)])
        self.minus2 = np.stack([self.index_of(self.nodes - 2 * eye[k]) for k in range(d)])
        self.face_idx = np.flatnonzero(self.nodes.sum(axis=1) == n)
        face_nodes = self.nodes[self.face_idx]
        # face_shift[k, m] = index of x + e_k - e_m for face nodes
        self.face_shift = np.full((d, d, len(self.face_idx)), -1, dtype=np.int64)
        for k in range(d):
            for m in range(d):
                if k != m:
                    self.face_shift[k, m] = self.index_of(face_nodes + eye[k] - eye[m])
        self.face_fallback = [self.fallback_pair(m, self.face_idx) for m in range(d)]
        self._delaunay: Optional[Delaunay] = None

    @property
    def size(self) -> int:
        return len(self.nodes)

    def index_of(self, lattice_points: np.ndarray) -> np.ndarray:
        """Node index of integer lattice points, -1 where the point is not a node."""
        pts = np.asarray(lattice_points, dtype=np.int64)
        valid = np.all(pts >= 0, axis=-1) & (pts.sum(axis=-1) <= self.n)
        keys = np.where(valid, pts @ self._base, 0)
        pos = np.clip(np.searchsorted(self.keys, keys), 0, len(self.keys) - 1)
        hit = valid & (self.keys[pos] == keys)
        return np.where(hit, pos, -1)

    def fallback_pair(self, axis: int, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Shifted difference pair (x + e_axis - e_j, x - e_j) with j the heaviest axis; -1 if unavailable."""
        nodes = self.nodes[rows]
        j = nodes.argmax(axis=1)
        eye = np.eye(self.d, dtype=np.int64)
        a = self.index_of(nodes + eye[axis] - eye[j])
        b = self.index_of(nodes - eye[j])
        bad = (j == axis) | (a < 0) | (b < 0)
        return np.where(bad, -1, a), np.where(bad, -1, b)

    def contains(self, points: np.ndarray, tol: float = INTERPOLATION_TOL) -> np.ndarray:
        pts = np.atleast_2d(points)
        scale = max(1.0, self.R)
        return np.all(pts >= -tol * scale, axis=-1) & (pts.sum(axis=-1) <= self.R + tol * scale)

    def interpolation_matrix(self, points: np.ndarray, tol: float = INTERPOLATION_TOL) -> sparse.csr_matrix:
        """
        Sparse (M, N) operator mapping node values to values at `points`.

        Lattice points are read exactly; other points use linear weights
        (d = 1) or barycentric weights on a Delaunay triangulation of the nodes.

        Raises:
            DomainError: if a point lies outside B_R^1
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.contains(pts, tol)
        if not np.all(inside):
            bad = int(np.argmin(inside))
            raise DomainError("point outside the grid", module="grid_solver",
                              witness={"point": pts[bad].tolist(), "R": self.R})
        pts = np.clip(pts, 0.0, None)
        M = len(pts)
        scaled = pts / self.h
        rounded = np.rint(scaled)
        exact_idx = self.index_of(rounded.astype(np.int64))
        exact = np.all(np.abs(scaled - rounded) <= tol * max(1.0, self.n), axis=-1) & (exact_idx >= 0)

        rows: List[np.ndarray] = [np.flatnonzero(exact)]
        cols: List[np.ndarray] = [exact_idx[exact]]
        vals: List[np.ndarray] = [np.ones(int(exact.sum()))]

        rest = np.flatnonzero(~exact)
        if len(rest):
            if self.d == 1:
                t = np.minimum(scaled[rest, 0], self.n)
                left = np.minimum(np.floor(t).astype(np.int64), max(self.n - 1, 0))
                frac = t - left
                rows += [rest, rest]
                cols += [left, np.minimum(left + 1, self.n)]
                vals += [1.0 - frac, frac]
            else:
                tri = self._triangulation()
                simplex = tri.find_simplex(pts[rest], tol=tol * max(1.0, self.R))
                if np.any(simplex < 0):
                    bad = rest[int(np.argmin(simplex))]
                    raise DomainError("point outside the triangulated grid", module="grid_solver",
                                      witness={"point": pts[bad].tolist()})
                transform = tri.transform[simplex]
                bary = np.einsum("ijk,ik->ij", transform[:, : self.d], pts[rest] - transform[:, self.d])
                weights = np.column_stack([bary, 1.0 - bary.sum(axis=1)])
                vertices = tri.simplices[simplex]
                rows.append(np.repeat(rest, self.d + 1))
                cols.append(vertices.ravel())
                vals.append(weights.ravel())

        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, self.size)
        )

    def _triangulation(self) -> Delaunay:
        if self._delaunay is None:
            logger.info(f"🔺 Triangulating {self.size} nodes (d={self.d})")
            self._delaunay = Delaunay(self.coords)
        return self._delaunay


def build_grid(d: int, R: float, h: float, max_nodes: int = MAX_GRID_NODES) -> Grid:
    """
    Build the simplex lattice of B_R^1 with spacing h.

    Raises:
        ConfigError: if h does not divide R
        GridCapacityError: if the node count exceeds max_nodes
    """
    if d < 1 or R <= 0 or h <= 0:
        raise ConfigError(f"invalid grid d={d}, R={R}, h={h}", module="grid_solver")
    n = int(round(R / h))
    if n < 1 or abs(n * h - R) > 1e-12 * R:
        raise ConfigError(f"h={h} does not divide R={R}", module="grid_solver")
    count = math.comb(n + d, d)
    if count > max_nodes:
        raise GridCapacityError(
            f"grid would have {count} nodes (cap {max_nodes}); use a larger h",
            module="grid_solver", witness={"d": d, "R": R, "h": h, "nodes": count},
        )
    grid = Grid(d, R, h, n)
    logger.info(f"📐 Built grid d={d} R={R} h={h}: {grid.size} nodes")
    return grid


@dataclass
class GridField:
    """Tabulated value function: values[s, node, i] at times[s]."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[None]
        expected = (len(self.times), self.grid.size, self.grid.d)
        if self.values.shape != expected:
            raise ConfigError(f"field values have shape {self.values.shape}, expected {expected}",
                              module="grid_solver")
        if not np.all(np.isfinite(self.values)):
            raise BlowUpError("field contains non-finite values", module="grid_solver")

    @property
    def n_slices(self) -> int:
        return len(self.times)

    def slice(self, index: int = -1) -> np.ndarray:
        return self.values[index]

    def interpolate(self, points: np.ndarray, index: int = -1) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, self.grid.d)
        out = self.grid.interpolation_matrix(flat) @ self.values[index]
        return out.reshape(pts.shape[:-1] + (self.grid.d,))

    def to_frame(self) -> pd.DataFrame:
        d = self.grid.d
        S, N = len(self.times), self.grid.size
        data = {"t": np.repeat(self.times, N)}
        coords = np.tile(self.grid.coords, (S, 1))
        for k in range(d):
            data[f"x_{k + 1}"] = coords[:, k]
        flat = self.values.reshape(S * N, d)
        for i in range(d):
            data[f"U_{i + 1}"] = flat[:, i]
        return pd.DataFrame(data)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def save_binary(self, path: str) -> None:
        header = json.dumps({
            "d": self.grid.d, "R": self.grid.R, "h": self.grid.h,
            "times": self.times.tolist(), "n_nodes": self.grid.size,
        }).encode("utf-8")
        with open(path, "wb") as f:
            f.write(FIELD_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load_binary(cls, path: str) -> "GridField":
        with open(path, "rb") as f:
            if f.read(4) != FIELD_MAGIC:
                raise ConfigError(f"{path} is not a field container", module="grid_solver")
            (length,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(length).decode("utf-8"))
            raw = np.frombuffer(f.read(), dtype="<f8")
        grid = build_grid(header["d"], header["R"], header["h"])
        values = raw.reshape(len(header["times"]), header["n_nodes"], header["d"])
        return cls(grid, np.array(header["times"]), values.copy())

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "GridField":
        d = sum(1 for c in frame.columns if c.startswith("x_"))
        if d == 0:
            raise ConfigError("field table has no coordinate columns", module="grid_solver")
        coords = frame[[f"x_{k + 1}" for k in range(d)]].to_numpy()
        positive = coords[coords > 0]
        h = float(positive.min()) if positive.size else 1.0
        R = float(coords.sum(axis=1).max())
        grid = build_grid(d, round(R / h) * h, h)
        times = np.unique(frame["t"].to_numpy())
        values = np.zeros((len(times), grid.size, d))
        for s, t in enumerate(times):
            rows = frame[frame["t"] == t]
            idx = grid.index_of(np.rint(rows[[f"x_{k + 1}" for k in range(d)]].to_numpy() / h).astype(np.int64))
            if np.any(idx < 0) or len(idx) != grid.size:
                raise ConfigError(f"field table slice t={t} does not cover the grid", module="grid_solver")
            values[s, idx] = rows[[f"U_{i + 1}" for i in range(d)]].to_numpy()
        return cls(grid, times, values)


def read_field(path: str) -> GridField:
    if str(path).endswith(".csv"):
        return GridField.from_frame(pd.read_csv(path))
    return GridField.load_binary(path)


def sigma_profile(x: np.ndarray, s_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth bounded sigma ~ x^2 near 0, with its derivative."""
    s2 = s_max * s_max
    x2 = x * x
    sigma = x2 * s2 / (x2 + s2)
    dsigma = 2.0 * x * s2 * s2 / (x2 + s2) ** 2
    return sigma, dsigma


class MasterEquationScheme:
    def __init__(self, spec: ModelSpec, grid: Grid):
        """
        Upwind discretisation of G - r*U - v.grad U - lambda(U - T*U(Tx)).

        Args:
            spec: Model instance
            grid: Grid the field lives on
        """
        if spec.d != grid.d:
            raise ConfigError(f"spec has d={spec.d} but grid has d={grid.d}", module="grid_solver")
        self.spec = spec
        self.grid = grid
        self.noise_matrix = None
        if spec.lam > 0:
            self.noise_matrix = grid.interpolation_matrix(grid.coords @ spec.T.T)

    # hooks overridden by the penalized and viscous schemes
    def velocity(self, U: np.ndarray, F: np.ndarray) -> np.ndarray:
        return F

    def extra_drift(self, U: np.ndarray) -> np.ndarray:
        return 0.0

    def extra_rate(self, U: np.ndarray) -> np.ndarray:
        return 0.0

    def reaction(self, U: np.ndarray) -> np.ndarray:
        return 0.0

    def implicit(self, rhs: np.ndarray, dtau: np.ndarray) -> np.ndarray:
        return rhs

    def noise(self, U: np.ndarray) -> np.ndarray:
        if self.noise_matrix is None:
            return 0.0
        return self.spec.lam * (U - (self.noise_matrix @ U) @ self.spec.T)

    def transport(self, U: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Upwind approximation of (v . grad) U^i for every component i."""
        g = self.grid
        h = g.h
        out = np.zeros_like(U)
        for k in range(g.d):
            has_m = g.minus[k] >= 0
            fwd = (U[g.plus[k]] - U) / h
            bwd = (U - U[g.minus[k]]) / h
            vk = v[:, k]
            deriv = np.where(((vk > 0) & has_m)[:, None], bwd, fwd)
            out += vk[:, None] * deriv
        if len(g.face_idx):
            out[g.face_idx] = self._face_transport(U, v)
        return out

    def _face_transport(self, U: np.ndarray, v: np.ndarray) -> np.ndarray:
        g = self.grid
        h = g.h
        f = g.face_idx
        vf = v[f]
        Uf = U[f]
        has_m = g.minus[:, f] >= 0
        pos = vf > 0
        neg = vf < 0
        s_pos = np.where(pos, vf, 0.0).sum(axis=1)
        s_neg = np.where(neg, vf, 0.0).sum(axis=1)
        tangent = s_pos > 0
        safe_pos = np.where(tangent, s_pos, 1.0)
        out = np.zeros_like(Uf)
        for k in range(g.d):
            for m in range(g.d):
                if k == m:
                    continue
                coef = np.where(tangent & neg[:, k] & pos[:, m], vf[:, k] * vf[:, m] / safe_pos, 0.0)
                if not np.any(coef):
                    continue
                ahead = g.face_shift[k, m]
                behind = g.face_shift[m, k]
                diff = np.where(
                    (ahead >= 0)[:, None], (U[ahead] - Uf) / h,
                    np.where((behind >= 0)[:, None], (Uf - U[behind]) / h, 0.0),
                )
                out += coef[:, None] * diff
        for m in range(g.d):
            rest = np.where(tangent, np.where(pos[:, m], vf[:, m] * (1.0 + s_neg / safe_pos), 0.0), vf[:, m])
            if not np.any(rest):
                continue
            a, b = g.face_fallback[m]
            bwd = (Uf - U[g.minus[m, f]]) / h
            shifted = np.where(((a >= 0) & (b >= 0))[:, None], (U[a] - U[b]) / h, 0.0)
            out += rest[:, None] * np.where(has_m[m][:, None], bwd, shifted)
        return out

    def rates(self, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Explicit part of dU/dt and the transport velocity."""
        F, G = self.spec.dynamics(self.grid.coords, U)
        v = self.velocity(U, F)
        drift = G - self.transport(U, v) - self.noise(U) + self.extra_drift(U)
        return drift, v

    def stability_rate(self, v: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Per-node |v|_1/h + 2*lambda (+ scheme-specific rates)."""
        return np.abs(v).sum(axis=1) / self.grid.h + 2.0 * self.spec.lam + self.extra_rate(U)

    def residual(self, U: np.ndarray) -> np.ndarray:
        """Pointwise stationary residual G - rU - v.grad U - noise - reaction."""
        drift, _ = self.rates(U)
        return drift - (self.spec.r or 0.0) * U - self.reaction(U)

    def march(self, U0: np.ndarray, t_f: float, dt: float, store_every: int = 1,
              t_start: float = 0.0) -> GridField:
        """Explicit Euler march from U0; every `store_every`-th slice is kept."""
        if dt <= 0 or t_f <= 0:
            raise ConfigError(f"need t_f > 0 and dt > 0, got t_f={t_f}, dt={dt}", module="grid_solver")
        n_steps = max(1, int(math.ceil(t_f / dt - 1e-9)))
        dt = t_f / n_steps
        U = np.array(U0, dtype=float)
        times = [t_start]
        slices = [U.copy()]
        for step in range(1, n_steps + 1):
            drift, v = self.rates(U)
            rate = float(np.max(self.stability_rate(v, U)))
            if dt * rate > CFL_NUMBER:
                raise CFLViolationError(
                    f"dt={dt:.3e} violates CFL (dt*rate={dt * rate:.3f} > {CFL_NUMBER})",
                    module="grid_solver", witness={"t": t_start + (step - 1) * dt, "rate": rate, "dt": dt},
                )
            U = self.implicit(U + dt * drift, np.full((U.shape[0], 1), dt))
            if not np.all(np.isfinite(U)):
                node = int(np.argwhere(~np.isfinite(U))[0][0])
                raise BlowUpError(f"non-finite values at t={t_start + step * dt:.6g}", module="grid_solver",
                                  witness={"t": t_start + step * dt, "x": self.grid.coords[node].tolist()})
            if step % store_every == 0 or step == n_steps:
                times.append(t_start + step * dt)
                slices.append(U.copy())
        return GridField(self.grid, np.array(times), np.stack(slices), {"dt": dt, "steps": n_steps})

    def relax(self, U_init: Optional[np.ndarray] = None, tol: float = SOLVER_TOL,
              window: int = STAGNATION_WINDOW, max_steps: int = MAX_PSEUDO_STEPS) -> Tuple[np.ndarray, float, int]:
        """
        False-transient iteration to the stationary equation with node-local pseudo-time steps.

        Returns:
            (U, final residual, sweeps)

        Raises:
            NonConvergenceError: on stagnation or when max_steps is exhausted
        """
        r = self.spec.r
        if r is None:
            raise ConfigError("stationary solve needs a discount rate r", module="grid_solver")
        U = np.zeros((self.grid.size, self.grid.d)) if U_init is None else np.array(U_init, dtype=float)
        history: List[float] = []
        for sweep in range(max_steps):
            self.before_sweep(U, sweep)
            drift, v = self.rates(U)
            res = drift - r * U - self.reaction(U)
            norm = float(np.max(np.abs(res)))
            history.append(norm)
            if not np.isfinite(norm):
                raise BlowUpError(f"non-finite residual at sweep {sweep}", module="grid_solver")
            if norm <= tol:
                return U, norm, sweep
            if sweep >= window and norm > 0.1 * history[sweep - window]:
                raise NonConvergenceError(
                    f"residual stagnated at {norm:.3e} (window {window})", module="grid_solver",
                    witness={"residual": norm, "sweep": sweep, "window_start": history[sweep - window]},
                )
            dtau = CFL_NUMBER / (self.stability_rate(v, U) + r)
            U = self.implicit(U + dtau[:, None] * (drift - r * U), dtau[:, None])
            if sweep and sweep % 5000 == 0:
                logger.info(f"🔄 sweep {sweep}: residual {norm:.3e}")
        raise NonConvergenceError(f"no convergence in {max_steps} sweeps (residual {history[-1]:.3e})",
                                  module="grid_solver", witness={"residual": history[-1]})

    def before_sweep(self, U: np.ndarray, sweep: int) -> None:
        pass


class ViscousScheme(MasterEquationScheme):
    def __init__(self, spec: ModelSpec, grid: Grid, eps_visc: float):
        """Adds eps*sum_j sigma(x_j) d_jj U^i + eps*sigma'(x_i) d_i U^i to the drift."""
        super().__init__(spec, grid)
        self.eps = eps_visc
        self.sigma, self.dsigma = sigma_profile(grid.coords, grid.R / 4.0)

    def extra_drift(self, U: np.ndarray) -> np.ndarray:
        g = self.grid
        h2 = g.h * g.h
        out = np.zeros_like(U)
        for j in range(g.d):
            has_p = (g.plus[j] >= 0)[:, None]
            has_m = (g.minus[j] >= 0)[:, None]
            has_m2 = (g.minus2[j] >= 0)[:, None]
            central = (U[g.plus[j]] - 2.0 * U + U[g.minus[j]]) / h2
            backward = (U - 2.0 * U[g.minus[j]] + U[g.minus2[j]]) / h2
            second = np.where(has_p & has_m, central, np.where(has_m2, backward, 0.0))
            out += self.sigma[:, j][:, None] * second
            # sigma'(x_j) d_j U^j, upwinded as a velocity -eps*sigma' along axis j
            fwd = (U[g.plus[j], j] - U[:, j]) / g.h
            bwd = (U[:, j] - U[g.minus[j], j]) / g.h
            first = np.where(g.plus[j] >= 0, fwd, np.where(g.minus[j] >= 0, bwd, 0.0))
            out[:, j] += self.dsigma[:, j] * first
        return self.eps * out

    def extra_rate(self, U: np.ndarray) -> np.ndarray:
        return self.eps * self.dsigma.max(axis=1) / self.grid.h


def _precheck(spec: ModelSpec, grid: Grid, stationary: bool, force: bool, seed: int) -> None:
    sampler = StateSampler(spec.d, grid.R, seed)
    checks = [check_hyp1(spec, sampler, n_samples=PRECHECK_SAMPLES)]
    if stationary:
        checks.append(check_hyp2(spec, sampler, n_samples=PRECHECK_SAMPLES))
    for report in checks:
        if report.passed:
            continue
        if force:
            logger.warning(f"⚠️ {report.hypothesis} fails but solve forced: {report.witness}")
            continue
        raise HypothesisError(f"{report.hypothesis} fails; refusing to solve (use force)",
                              module="grid_solver", witness=report.witness)


def solve_td(spec: ModelSpec, grid: Grid, t_f: float, dt: float, force: bool = False,
             store_every: int = 1, seed: int = DEFAULT_SEED) -> GridField:
    """
    Explicit upwind march of dU/dt = G - (F.grad)U - lambda(U - T*U(Tx)) from U0.

    Args:
        spec: Model with U0
        grid: Grid on B_R^1
        t_f: Final time
        dt: Time step (rounded down so that t_f is hit exactly)
        force: Solve even if the boundary hypothesis fails
        store_every: Keep every k-th slice

    Returns:
        GridField with the stored slices

    Raises:
        HypothesisError, CFLViolationError, BlowUpError
    """
    _precheck(spec, grid, stationary=False, force=force, seed=seed)
    scheme = MasterEquationScheme(spec, grid)
    logger.info(f"🚀 solve_td: t_f={t_f}, dt={dt}, nodes={grid.size}")
    field_ = scheme.march(spec.initial(grid.coords), t_f, dt, store_every)
    logger.info(f"✅ solve_td finished: {field_.meta['steps']} steps")
    return field_


def solve_stationary(spec: ModelSpec, grid: Grid, tol: float = SOLVER_TOL, force: bool = False,
                     U_init: Optional[np.ndarray] = None, seed: int = DEFAULT_SEED,
                     window: int = STAGNATION_WINDOW) -> GridField:
    """False-transient solve of rU + (F.grad)U + lambda(U - T*U(Tx)) = G."""
    if spec.r is None:
        raise ConfigError("stationary solve needs a discount rate r", module="grid_solver")
    _precheck(spec, grid, stationary=True, force=force, seed=seed)
    scheme = MasterEquationScheme(spec, grid)
    logger.info(f"🚀 solve_stationary: r={spec.r}, nodes={grid.size}, tol={tol}")
    U, residual, sweeps = scheme.relax(U_init, tol, window)
    logger.info(f"✅ solve_stationary converged in {sweeps} sweeps (residual {residual:.2e})")
    return GridField(grid, np.array([0.0]), U[None], {"residual": residual, "sweeps": sweeps})


def solve_viscous(spec: ModelSpec, grid: Grid, eps_visc: float, t_f: float, dt: float,
                  force: bool = False, store_every: int = 1, seed: int = DEFAULT_SEED) -> GridField:
    """Time-dependent solve with the degenerate elliptic regularisation; eps_visc = 0 is solve_td."""
    if eps_visc < 0:
        raise ConfigError(f"eps_visc must be >= 0, got {eps_visc}", module="grid_solver")
    if eps_visc == 0:
        return solve_td(spec, grid, t_f, dt, force=force, store_every=store_every, seed=seed)
    _precheck(spec, grid, stationary=False, force=force, seed=seed)
    scheme = ViscousScheme(spec, grid, eps_visc)
    parabolic = dt * eps_visc * float(scheme.sigma.max()) / grid.h ** 2
    if parabolic > PARABOLIC_CFL:
        raise CFLViolationError(
            f"parabolic bound dt*eps*max(sigma)/h^2 = {parabolic:.3f} > {PARABOLIC_CFL}",
            module="grid_solver", witness={"dt": dt, "eps_visc": eps_visc, "value": parabolic},
        )
    logger.info(f"🚀 solve_viscous: eps={eps_visc}, t_f={t_f}, dt={dt}")
    return scheme.march(spec.initial(grid.coords), t_f, dt, store_every)


def gradient(field_: GridField, index: int = -1) -> Tuple[np.ndarray, float]:
    """
    Per-node difference matrix D[n, i, k] ~ d_k U^i of one slice.

    Central differences where both neighbours exist, one-sided otherwise.

    Returns:
        (D, max over nodes of the operator 2-norm)
    """
    g = field_.grid
    U = field_.slice(index)
    D = np.zeros((g.size, g.d, g.d))
    rows = np.arange(g.size)
    for k in range(g.d):
        has_p = g.plus[k] >= 0
        has_m = g.minus[k] >= 0
        fwd = (U[g.plus[k]] - U) / g.h
        bwd = (U - U[g.minus[k]]) / g.h
        cen = (U[g.plus[k]] - U[g.minus[k]]) / (2.0 * g.h)
        a, b = g.fallback_pair(k, rows)
        shifted = np.where(((a >= 0) & (b >= 0))[:, None], (U[a] - U[b]) / g.h, 0.0)
        D[:, :, k] = np.where(
            (has_p & has_m)[:, None], cen,
            np.where(has_m[:, None], bwd, np.where(has_p[:, None], fwd, shifted)),
        )
    norms = np.linalg.norm(D, ord=2, axis=(1, 2))
    return D, float(norms.max())


def equation_residual(field_: GridField, spec: ModelSpec, index: int = -1) -> np.ndarray:
    """Pointwise residual G - rU - (F.grad)U - lambda(U - T*U(Tx)) of one slice."""
    scheme = MasterEquationScheme(spec, field_.grid)
    return scheme.residual(field_.slice(index))
