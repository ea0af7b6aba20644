"""
Experiment Pipeline Service
Runs a manifest end to end: bounds → solve → oracle comparison → CSV artifacts, with exit codes.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from ..config import get_settings
from ..exceptions import CertificateError, ProblemConfigError
from ..models.manifest import ExperimentManifest
from ..models.problem import FbsdeProblem, load_problem_config
from ..models.validation import validate_problem
from ..utils.bounds import BoundsReport, compute_bounds
from ..utils.reporting import convergence_frame, write_csv_atomic
from .backward import BackwardConfig, RegressionBasis
from .global_paste import solve_global
from .oracle import PdeGridConfig, oracle_for, pde_oracle
from .picard import PicardConfig, SolveReport, solve_bsde, solve_local
from .simulation import PathEnsemble, make_grid

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_CONVERGED = 2
EXIT_ORACLE = 3


@dataclass
class PipelineResult:
    exit_code: int = EXIT_OK
    message: str = ""
    report: Optional[SolveReport] = None
    bounds: Optional[BoundsReport] = None
    reference: Optional[float] = None
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    artifacts: Dict[str, Path] = field(default_factory=dict)


class ExperimentPipeline:
    """
    Executes one ExperimentManifest.
    Configuration errors propagate as exceptions; solver outcomes map to exit codes.
    """

    def __init__(self, manifest: ExperimentManifest, out_dir: Optional[Path] = None):
        self.manifest = manifest
        self.out_dir = Path(out_dir) if out_dir is not None else Path(manifest.outputs.directory)
        self.processing_stats = {
            'stages_completed': 0,
            'artifacts_written': 0,
            'solve_time': 0.0,
            'total_time': 0.0,
        }

    # -- configuration -----------------------------------------------------

    def picard_config(self) -> PicardConfig:
        n = self.manifest.numerics
        backward = BackwardConfig(
            basis=RegressionBasis(kind=n.basis.kind, degree=n.basis.degree, bins=n.basis.bins),
            truncation_mode=n.truncation.mode,
            truncation_radius=n.truncation.radius,
            inner_iters=n.inner_iters,
            ridge=n.ridge,
        )
        return PicardConfig(
            max_iters=n.max_iters,
            tol=n.tol,
            backward=backward,
            horizon_override=n.horizon_override,
            enforce_certificate=n.enforce_certificate,
            c1=n.c1,
        )

    def pde_grid(self) -> PdeGridConfig:
        pde = self.manifest.numerics.pde
        return PdeGridConfig(lower=pde.lower, upper=pde.upper, nodes=pde.nodes,
                             t_steps=pde.t_steps, padding=pde.padding,
                             field_sweeps=pde.field_sweeps, field_tol=pde.field_tol)

    # -- stages ------------------------------------------------------------

    def run(self) -> PipelineResult:
        started = time.perf_counter()
        m = self.manifest
        result = PipelineResult()
        problem = load_problem_config(m.problem)
        logger.info(f"Running '{m.name}': {m.pipeline} on {problem.describe()}")

        result.bounds = compute_bounds(problem, c1=m.numerics.c1, n_cap=m.numerics.schedule_cap)
        result.frames["bounds"] = result.bounds.to_frame()
        result.frames["schedule"] = result.bounds.schedule_frame()
        if "validation" in m.outputs.csv:
            self._validate(problem, result)
        self._stage_done()

        try:
            if m.pipeline == "solve-local":
                self._solve_local(problem, result)
            elif m.pipeline == "solve-global":
                self._solve_global(problem, result)
            elif m.pipeline == "solve-bsde":
                self._solve_bsde(problem, result)
            elif m.pipeline == "oracle":
                self._oracle(problem, result)
        except CertificateError as e:
            result.exit_code = EXIT_CONFIG
            result.message = str(e)
            logger.error(f"'{m.name}' aborted: {e}")

        if result.exit_code == EXIT_OK and m.pipeline in ("solve-local", "solve-global", "solve-bsde"):
            self._check_expectations(problem, result)

        self._write_artifacts(result)
        self.processing_stats['total_time'] = time.perf_counter() - started
        logger.info(f"'{m.name}' finished with exit code {result.exit_code} "
                    f"in {self.processing_stats['total_time']:.2f}s")
        return result

    def _validate(self, p: FbsdeProblem, result: PipelineResult):
        report = validate_problem(p, samples=get_settings().validation_samples, seed=self.manifest.numerics.seed)
        result.frames["validation"] = report.to_frame()
        if not report.ok:
            logger.warning(f"{p.name}: {len(report.violations)} declared constant(s) look violated; "
                           f"the bounds may not apply")

    def _stage_done(self):
        self.processing_stats['stages_completed'] += 1

    def _solve_local(self, p: FbsdeProblem, result: PipelineResult):
        n = self.manifest.numerics
        grid = make_grid(p.horizon, n.K)
        started = time.perf_counter()
        ens, report = solve_local(p, grid, n.n_paths, n.seed, self.picard_config(), run_id=self.manifest.name)
        self.processing_stats['solve_time'] = time.perf_counter() - started
        result.report = report
        result.frames["report"] = report.to_frame()
        if report.history:
            result.frames["convergence"] = convergence_frame([report])
        self._ensemble_frames(ens, result)
        self._stage_done()

    def _solve_global(self, p: FbsdeProblem, result: PipelineResult):
        n = self.manifest.numerics
        started = time.perf_counter()
        solution = solve_global(p, n.K, n.n_paths, n.seed, self.picard_config(),
                                design_spread=n.design_spread, pasting_step=n.pasting_step,
                                require_global_conditions=n.require_global_conditions)
        self.processing_stats['solve_time'] = time.perf_counter() - started
        report = solution.report
        report.run_id = self.manifest.name
        result.report = report
        result.frames["report"] = report.to_frame()
        history = convergence_frame(solution.interval_reports)
        if not history.empty:
            result.frames["convergence"] = history
        if solution.decoupling is not None:
            result.frames["field"] = solution.decoupling.to_frame()
            if p.dims.m == 1:
                result.frames["field_table"] = solution.decoupling.table_frame()
        if solution.ensemble is not None:
            self._ensemble_frames(solution.ensemble, result)
        self._stage_done()

    def _solve_bsde(self, p: FbsdeProblem, result: PipelineResult):
        n = self.manifest.numerics
        started = time.perf_counter()
        ens, report = solve_bsde(p, n.K, n.n_paths, n.seed, self.picard_config().backward,
                                 enforce_certificate=n.enforce_certificate, n_cap=n.schedule_cap,
                                 run_id=self.manifest.name)
        self.processing_stats['solve_time'] = time.perf_counter() - started
        result.report = report
        result.frames["report"] = report.to_frame()
        self._ensemble_frames(ens, result)
        self._stage_done()

    def _ensemble_frames(self, ens: PathEnsemble, result: PipelineResult):
        if ens.sweep is not None:
            result.frames["diagnostics"] = ens.sweep.diagnostics_frame()
        count = self.manifest.outputs.trajectory_paths
        if count > 0 and ens.X is not None:
            result.frames["trajectories"] = ens.to_frame(np.arange(min(count, ens.n_paths)))

    def _oracle(self, p: FbsdeProblem, result: PipelineResult):
        kind = self.manifest.expected.oracle if self.manifest.expected else None
        closed = oracle_for(p) if kind != "pde" else None
        if closed is not None:
            result.frames["oracle"] = closed.to_frame()
            if not closed.singular:
                result.reference = float(closed.value(0.0))
        else:
            solution = pde_oracle(p, self.pde_grid())
            result.frames["oracle"] = solution.to_frame()
            result.reference = float(solution.theta(0.0, p.x0)[0, 0])
        logger.info(f"Oracle reference Y0 = {result.reference}")
        self._stage_done()

    def _reference_value(self, p: FbsdeProblem) -> Optional[float]:
        expected = self.manifest.expected
        if expected.value is not None:
            return expected.value
        if expected.oracle == "pde":
            return float(pde_oracle(p, self.pde_grid()).theta(0.0, p.x0)[0, 0])
        if expected.oracle == "closed_form":
            oracle = oracle_for(p)
            if oracle is None:
                raise ProblemConfigError(f"no closed-form oracle for problem {p.name}")
            if oracle.singular:
                return math.nan
            return float(oracle.value(0.0))
        return None

    def _check_expectations(self, p: FbsdeProblem, result: PipelineResult):
        expected = self.manifest.expected
        report = result.report
        if expected is None:
            if not report.converged:
                result.exit_code = EXIT_NOT_CONVERGED
                result.message = f"solver did not converge: {report.status}"
            return
        if report.converged != expected.converged:
            result.exit_code = EXIT_NOT_CONVERGED
            result.message = f"expected converged={expected.converged}, got status {report.status}"
            logger.error(result.message)
            return
        reference = self._reference_value(p)
        if reference is None or not report.converged:
            return
        result.reference = reference
        y0 = report.y0[0]
        error = abs(y0 - reference)
        if expected.relative and reference != 0:
            error /= abs(reference)
        report.oracle_error = error
        result.frames["report"] = report.to_frame()
        if not error <= expected.tolerance:
            result.exit_code = EXIT_ORACLE
            result.message = f"Y0={y0:.10g} misses reference {reference:.10g} (error {error:.3g} > {expected.tolerance})"
            logger.error(result.message)
        else:
            logger.info(f"Y0={y0:.10g} matches reference {reference:.10g} (error {error:.3g})")

    def _write_artifacts(self, result: PipelineResult):
        for name in self.manifest.outputs.csv + (["trajectories"] if "trajectories" in result.frames else []):
            frame = result.frames.get(name)
            if frame is None or name in result.artifacts:
                continue
            result.artifacts[name] = write_csv_atomic(frame, self.out_dir / f"{name}.csv")
            self.processing_stats['artifacts_written'] += 1

    def get_pipeline_stats(self) -> Dict[str, Any]:
        return self.processing_stats.copy()

