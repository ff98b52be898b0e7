#!/usr/bin/env python3
"""
Command-line driver: binds a JSON run config to solves, verifications and exports.

    python mfg_master.py --config run.json [--workers N] [--force] [--output DIR] [--seed S]

Exit codes: 0 success, 1 solver failure, 2 verification fail, 3 hypothesis
fail, 64 configuration or usage error.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import RESOLVED_CONFIG_FILE, SUMMARY_WORKBOOK
from characteristics import integrate_coupled, shoot
from grid_solver import GridField, build_grid, read_field, solve_stationary, solve_td, solve_viscous
from impulse import alpha_to_frame, as_cost_matrix, check_hyp7, solve_penalized_impulse
from model_core import (
    CFLViolationError,
    ConfigError,
    DomainError,
    GridCapacityError,
    HypothesisError,
    HypothesisReport,
    MasterEquationError,
    ModelSpec,
    StateSampler,
    UnsupportedModeError,
    check_discount,
    check_hyp1,
    check_hyp2,
    check_monotone,
)
from models import (
    EntryExitSpec,
    QuadraticFamilySpec,
    build_model,
    compare_flux_jacobian,
    entry_exit_grid,
    mass_conservation,
    reduce_field,
    solve_entry_exit,
    verify_entry_exit,
)
from monotone_verify import (
    VerificationReport,
    lipschitz_certificate,
    monotonicity_monitor,
    verify_impulse,
    verify_phi_monotone,
    verify_stationary,
    verify_stopping,
    verify_td,
)
from reporting import report_frame, setup_logging, write_json, write_plotdata, write_summary_workbook
from run_config import PlotSection, RunConfig, load_config
from stopping import StoppingConfig, continuation_limit, post_exit_state, solve_penalized_td

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_VERIFY_FAIL = 2
EXIT_HYPOTHESIS_FAIL = 3
EXIT_USAGE = 64

USAGE_ERRORS = (ConfigError, UnsupportedModeError, DomainError, GridCapacityError, CFLViolationError)


@dataclass
class RunOutcome:
    exit_code: int = EXIT_OK
    artifacts: List[str] = field(default_factory=list)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)


class Run:
    def __init__(self, cfg: RunConfig):
        """
        One configured run.

        Args:
            cfg: Validated run configuration
        """
        self.cfg = cfg
        self.out_dir = cfg.output.dir
        self.outcome = RunOutcome()
        self._spec: Optional[ModelSpec] = None
        self._family: Any = None

    def path(self, suffix: str) -> str:
        return os.path.join(self.out_dir, f"{self.cfg.output.prefix}_{suffix}")

    def model(self) -> Tuple[ModelSpec, Any]:
        if self._spec is None:
            self._spec, self._family = build_model(self.cfg.model.name, self.cfg.model.params)
        return self._spec, self._family

    def grid(self):
        g = self.cfg.grid
        return build_grid(g.d, g.R, g.h)

    def jump_costs(self) -> np.ndarray:
        spec, _ = self.model()
        return as_cost_matrix(self.cfg.model.jump_costs, spec.d)

    def save_field(self, field_: GridField, name: str = "field") -> str:
        if self.cfg.output.binary:
            path = self.path(f"{name}.mfgf")
            field_.save_binary(path)
        else:
            path = self.path(f"{name}.csv")
            field_.to_csv(path)
        logger.info(f"💾 Field saved to {path}")
        self.outcome.artifacts.append(path)
        if field_.grid.size * field_.n_slices <= 100_000:
            self.outcome.tables["Field"] = field_.to_frame()
        if self.cfg.plot.enabled:
            self.outcome.artifacts.append(emit_plotdata(field_, self.path(f"{name}.dat"), self.cfg.plot))
        return path

    def save_json(self, suffix: str, payload: Dict[str, Any]) -> None:
        self.outcome.artifacts.append(write_json(self.path(suffix), payload))

    # ----- verification -----

    def verify(self, field_: GridField) -> VerificationReport:
        v = self.cfg.verify
        num = self.cfg.numerics
        spec, family = self.model()
        common = {"n_samples": v.n_samples, "tol": v.tol, "seed": num.seed, "workers": self.cfg.workers}
        definition = v.definition
        logger.info(f"🔍 Verifying field against the '{definition}' definition ({v.n_samples} samples)")
        if definition == "stationary":
            report = verify_stationary(field_, spec, **common)
        elif definition == "td":
            report = verify_td(field_, spec, **common)
        elif definition in ("stopping", "stopping-td"):
            report = verify_stopping(field_, spec, td=definition == "stopping-td", **common)
        elif definition == "impulse":
            report = verify_impulse(field_, spec, self.jump_costs(), **common)
        elif definition == "phi-monotone":
            phi, phi_jac = build_phi(v.phi)
            report = verify_phi_monotone(field_, spec, phi, phi_jac, **common)
        elif definition == "entry-exit":
            if not isinstance(family, EntryExitSpec):
                raise ConfigError("entry-exit verification needs model.name = 'entry-exit'", module="cli")
            report = verify_entry_exit(field_, family, **common)
        else:
            raise ConfigError(f"unknown verification definition '{definition}'", module="cli")

        if v.monitor:
            report.details["monitor"] = monotonicity_monitor(field_, self.cfg.plot.index, seed=num.seed).to_dict()
        if v.lipschitz_alpha is not None:
            report.details["lipschitz"] = lipschitz_certificate(
                field_, self.cfg.plot.index, v.lipschitz_alpha, v.lipschitz_t,
                spec=spec if spec.d == field_.grid.d else None, seed=num.seed,
            ).to_dict()
        report.reproduction = (f"python mfg_master.py --config "
                               f"{os.path.join(self.out_dir, RESOLVED_CONFIG_FILE)}")
        self.save_json("report.json", report.to_dict())
        self.outcome.tables["Verification"] = report_frame(report.to_dict())
        if not report.passed:
            self.outcome.exit_code = EXIT_VERIFY_FAIL
        return report

    def maybe_verify(self, field_: GridField) -> None:
        if self.cfg.verify.definition is not None:
            self.verify(field_)

    # ----- modes -----

    def run_td(self) -> None:
        spec, _ = self.model()
        num = self.cfg.numerics
        grid = self.grid()
        if num.eps_visc > 0:
            field_ = solve_viscous(spec, grid, num.eps_visc, num.t_f, num.dt, force=num.force,
                                   store_every=num.store_every, seed=num.seed)
        else:
            field_ = solve_td(spec, grid, num.t_f, num.dt, force=num.force, store_every=num.store_every,
                              seed=num.seed)
        self.save_field(field_)
        self.maybe_verify(field_)

    def run_stationary(self) -> None:
        spec, _ = self.model()
        num = self.cfg.numerics
        field_ = solve_stationary(spec, self.grid(), num.tol, force=num.force, seed=num.seed, window=num.window)
        self.save_json("solve.json", field_.meta)
        self.save_field(field_)
        self.maybe_verify(field_)

    def run_stopping(self) -> None:
        spec, _ = self.model()
        num = self.cfg.numerics
        grid = self.grid()
        stopping = StoppingConfig(num.eps_schedule, num.beta_prime_at_zero)
        if num.t_f is not None:
            eps = num.eps if num.eps is not None else stopping.eps_schedule[-1]
            field_ = solve_penalized_td(spec, grid, eps, num.t_f, num.dt, num.beta_prime_at_zero,
                                        force=num.force, store_every=num.store_every, seed=num.seed)
            self.save_field(field_)
            self.maybe_verify(field_)
            return
        field_ = continuation_limit(spec, grid, stopping, num.tol, force=num.force, seed=num.seed,
                                    window=num.window)
        certificate = {"certificates": field_.meta["certificates"], "warnings": field_.meta["warnings"],
                       "eps_last": field_.meta["eps_last"]}
        if num.post_exit_x is not None:
            certificate["post_exit"] = post_exit_state(spec, field_, num.post_exit_x).to_dict()
        self.save_certificate(certificate)
        self.save_field(field_)
        self.maybe_verify(field_)

    def save_certificate(self, certificate: Dict[str, Any]) -> None:
        self.save_json("certificate.json", certificate)
        frame = pd.DataFrame(certificate["certificates"])
        self.outcome.tables["Certificates"] = frame
        if self.cfg.plot.enabled:
            self.outcome.artifacts.append(emit_plotdata(frame, self.path("certificate.dat"), self.cfg.plot))

    def run_impulse(self) -> None:
        spec, _ = self.model()
        num = self.cfg.numerics
        k = self.jump_costs()
        eps = num.eps if num.eps is not None else num.eps_schedule[-1]
        field_, alpha = solve_penalized_impulse(spec, k, self.grid(), eps, num.tol, force=num.force,
                                                seed=num.seed, window=num.window)
        frame = alpha_to_frame(field_.grid, alpha)
        alpha_path = self.path("alpha.csv")
        frame.to_csv(alpha_path, index=False, float_format="%.17g")
        self.outcome.artifacts.append(alpha_path)
        self.outcome.tables["Alpha"] = frame
        self.save_json("solve.json", field_.meta)
        self.save_field(field_)
        self.maybe_verify(field_)

    def run_entry_exit(self) -> None:
        _, ee = self.model()
        num = self.cfg.numerics
        if self.cfg.grid.R:
            grid = build_grid(1, self.cfg.grid.R, self.cfg.grid.h)
        else:
            grid = entry_exit_grid(ee, self.cfg.grid.h)
        field_ = solve_entry_exit(ee, grid, StoppingConfig(num.eps_schedule, num.beta_prime_at_zero), num.tol,
                                  seed=num.seed, window=num.window)
        self.save_certificate({"certificates": field_.meta["certificates"], "eps_last": field_.meta["eps_last"],
                               "gradient_bound": field_.meta["gradient_bound"]})
        self.save_field(field_)
        self.maybe_verify(field_)

    def run_characteristics(self) -> None:
        spec, _ = self.model()
        num = self.cfg.numerics
        if num.y0 is not None:
            result = shoot(spec, num.y0, num.t_f, num.dt)
            payload = {"y0": num.y0, "t_f": num.t_f, "value": result.value.tolist(), "z": result.z.tolist(),
                       "residual": result.residual, "iterations": result.iterations}
            self.save_json("bvp.json", payload)
            self.outcome.tables["Characteristic"] = report_frame(payload)
            return
        trajectory = integrate_coupled(spec, num.z, num.t_f, num.dt)
        path = self.path("trajectory.csv")
        trajectory.to_csv(path)
        self.outcome.artifacts.append(path)
        self.outcome.tables["Trajectory"] = trajectory.to_frame()

    def run_verify(self) -> None:
        self.verify(read_field(self.cfg.input.field))

    def run_hypcheck(self) -> None:
        spec, family = self.model()
        num = self.cfg.numerics
        n = self.cfg.verify.n_samples
        tol = self.cfg.verify.tol
        R = self.cfg.grid.R or spec.R

        def sampler(index: int) -> StateSampler:
            return StateSampler(spec.d, R, num.seed).spawn(index)

        reports: List[HypothesisReport] = [
            check_hyp1(spec, sampler(0), n_samples=n, tol=tol),
            check_hyp2(spec, sampler(1), n_samples=n, tol=tol),
            check_monotone(spec, sampler(2), n_samples=n, tol=tol),
        ]
        if spec.r is not None:
            reports.append(check_discount(spec, sampler(3), n_samples=n, tol=tol))
        if self.cfg.model.jump_costs is not None:
            reports.append(check_hyp7(self.jump_costs()))
        if isinstance(family, QuadraticFamilySpec):
            reports.append(mass_conservation(spec, sampler(4), n_samples=n))
            reports.append(compare_flux_jacobian(family, sampler(5), n_samples=n))
        for report in reports:
            icon = "✅" if report.passed else "❌"
            logger.info(f"{icon} {report.hypothesis}: {report.verdict} (margin {report.margin:.3e})")
        payload = {"model": spec.name, "seed": num.seed, "all_passed": all(r.passed for r in reports),
                   "reports": [r.to_dict() for r in reports]}
        self.save_json("hypotheses.json", payload)
        self.outcome.tables["Hypotheses"] = pd.DataFrame(
            [{"hypothesis": r.hypothesis, "verdict": r.verdict, "margin": r.margin, "samples": r.samples}
             for r in reports])
        if not payload["all_passed"]:
            self.outcome.exit_code = EXIT_HYPOTHESIS_FAIL

    def run_reduce(self) -> None:
        reduced = reduce_field(read_field(self.cfg.input.field))
        self.save_field(reduced, "reduced_field")

    def execute(self) -> RunOutcome:
        handlers: Dict[str, Callable[[], None]] = {
            "td": self.run_td,
            "stationary": self.run_stationary,
            "stopping": self.run_stopping,
            "impulse": self.run_impulse,
            "entry-exit": self.run_entry_exit,
            "characteristics": self.run_characteristics,
            "verify": self.run_verify,
            "hypcheck": self.run_hypcheck,
            "reduce": self.run_reduce,
        }
        handlers[self.cfg.mode]()
        if self.cfg.output.workbook and self.outcome.tables:
            written = write_summary_workbook(os.path.join(self.out_dir, SUMMARY_WORKBOOK), self.outcome.tables)
            if written:
                self.outcome.artifacts.append(written)
        return self.outcome


def build_phi(params: Dict[str, Any]) -> Tuple[Callable, Callable]:
    """phi maps from a config entry: identity, scale (factor) or quadratic (x + coef * x^2)."""
    kind = params.get("kind", "identity")
    if kind == "identity":
        return (lambda x: np.array(x, dtype=float)), (lambda x: np.broadcast_to(np.eye(np.shape(x)[-1]),
                                                                                 np.shape(x) + (np.shape(x)[-1],)))
    if kind == "scale":
        factor = float(params.get("factor", 1.0))
        if factor <= 0:
            raise ConfigError(f"phi scale factor must be > 0, got {factor}", module="cli")
        return (lambda x: factor * np.asarray(x, dtype=float)), (
            lambda x: factor * np.broadcast_to(np.eye(np.shape(x)[-1]), np.shape(x) + (np.shape(x)[-1],)))
    if kind == "quadratic":
        coef = float(params.get("coef", 0.0))

        def phi(x):
            x = np.asarray(x, dtype=float)
            return x + coef * x * x

        def jac(x):
            x = np.asarray(x, dtype=float)
            return np.eye(x.shape[-1]) * (1.0 + 2.0 * coef * x)[..., None, :]

        return phi, jac
    raise ConfigError(f"unknown phi kind '{kind}'", module="cli")


def emit_plotdata(target, path: str, plot: Optional[PlotSection] = None) -> str:
    """
    Write gnuplot-ready columns for a field slice or a certificate table.

    Fields with more than two free coordinates need plot.slice_axis; the slice
    keeps nodes whose coordinate on that axis equals plot.slice_value.

    Raises:
        ConfigError: dimension > 2 without a usable slice directive
    """
    plot = plot or PlotSection()
    if isinstance(target, pd.DataFrame):
        columns = [c for c in ("eps", "max_positive_part", "grad_norm") if c in target.columns]
        return write_plotdata(path, target[columns] if columns else target, comment="certificate sweep")
    if not isinstance(target, GridField):
        raise ConfigError(f"cannot emit plot data for {type(target).__name__}", module="cli")

    grid = target.grid
    d = grid.d
    coords = grid.coords
    U = target.slice(plot.index)
    free = list(range(d))
    mask = np.ones(grid.size, dtype=bool)
    if plot.slice_axis is not None:
        if not 0 <= plot.slice_axis < d:
            raise ConfigError(f"slice axis {plot.slice_axis} out of range for d={d}", module="cli")
        mask = np.abs(coords[:, plot.slice_axis] - plot.slice_value) <= 1e-9 * max(1.0, grid.R)
        if not np.any(mask):
            raise ConfigError(f"no grid nodes with x_{plot.slice_axis + 1} = {plot.slice_value}", module="cli")
        free.remove(plot.slice_axis)
    if len(free) > 2:
        raise ConfigError(f"field has {len(free)} free coordinates; set plot.slice_axis", module="cli")
    data = {f"x_{k + 1}": coords[mask, k] for k in free}
    for i in range(d):
        data[f"U_{i + 1}"] = U[mask, i]
    frame = pd.DataFrame(data).sort_values([f"x_{k + 1}" for k in free])
    comment = f"t = {target.times[plot.index]:g}"
    if plot.slice_axis is not None:
        comment += f", x_{plot.slice_axis + 1} = {plot.slice_value:g}"
    return write_plotdata(path, frame, comment=comment)


def run(cfg: RunConfig) -> int:
    """
    Execute a run and map failures to exit codes.

    Returns:
        0 success, 1 solver failure, 2 verification fail, 3 hypothesis fail, 64 config error
    """
    os.makedirs(cfg.output.dir, exist_ok=True)
    cfg.save(os.path.join(cfg.output.dir, RESOLVED_CONFIG_FILE))
    logger.info(f"🚀 Mode '{cfg.mode}' with model '{cfg.model.name}' (seed {cfg.numerics.seed})")
    try:
        outcome = Run(cfg).execute()
    except HypothesisError as e:
        logger.error(f"❌ {e}")
        _write_failure(cfg, e)
        return EXIT_HYPOTHESIS_FAIL
    except USAGE_ERRORS as e:
        logger.error(f"❌ {e}")
        _write_failure(cfg, e)
        return EXIT_USAGE
    except MasterEquationError as e:
        logger.error(f"❌ {e}")
        _write_failure(cfg, e)
        return EXIT_SOLVER
    except Exception as e:
        logger.exception(f"❌ Unexpected {type(e).__name__}: {e}")
        try:
            _write_failure(cfg, e)
        except OSError as write_error:
            logger.error(f"❌ Could not write the error report: {write_error}")
        return EXIT_SOLVER

    for path in outcome.artifacts:
        logger.info(f"   📄 {path}")
    if outcome.exit_code == EXIT_OK:
        logger.info(f"✅ Run finished: {len(outcome.artifacts)} artifacts in {cfg.output.dir}")
    else:
        logger.warning(f"⚠️ Run finished with exit code {outcome.exit_code}")
    return outcome.exit_code


def _write_failure(cfg: RunConfig, error: Exception) -> None:
    payload = {
        "error": type(error).__name__,
        "module": getattr(error, "module", None),
        "message": str(error.args[0]) if error.args else "",
        "witness": getattr(error, "witness", None),
    }
    write_json(os.path.join(cfg.output.dir, f"{cfg.output.prefix}_error.json"), payload)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Finite-state master equation solver and monotone-solution verifier.")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--workers", type=int, help="Thread count for sampled verification")
    parser.add_argument("--force", action="store_true", help="Solve even when a standing hypothesis fails")
    parser.add_argument("--output", help="Output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="Root seed (overrides numerics.seed)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        cfg = load_config(args.config)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError(f"--workers must be >= 1, got {args.workers}", module="cli")
            cfg.workers = args.workers
        if args.force:
            cfg.numerics.force = True
        if args.output:
            cfg.output.dir = args.output
        if args.seed is not None:
            cfg.numerics.seed = args.seed
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(cfg.output.dir)
    try:
        return run(cfg)
    except KeyboardInterrupt:
        logger.warning("⚠️ Run interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
