"""
Picard Solver Service
Local coupled solver: alternate forward Euler runs and backward sweeps on a frozen Brownian ensemble.
Also the pure-BSDE solve, swept piece by piece over the Δₙ schedule.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Any, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..exceptions import CertificateError, NonFiniteStateError, ProblemConfigError
from ..models.problem import FbsdeProblem
from ..utils.bounds import bsde_intervals, compute_bounds, truncate_generator
from .backward import BackwardConfig, BackwardResult, backward_sweep
from .simulation import PathEnsemble, TimeGrid, forward_euler, make_grid, sample_brownian, zero_source

logger = logging.getLogger(__name__)

CERTIFIED = "theorem-covered"
OVERRIDE = "override"
NOT_COVERED = "not-theorem-covered"


@dataclass
class PicardConfig:
    """Configuration for the Picard iteration"""
    max_iters: int = 50
    tol: float = 1e-8                          # threshold on the successive-difference metric
    backward: BackwardConfig = field(default_factory=BackwardConfig)
    horizon_override: Optional[float] = None   # user-certified horizon when C_loc is too small
    enforce_certificate: bool = True
    c1: Optional[float] = None                 # BDG constant; None: settings.bdg_constant
    divergence_window: int = 3                 # consecutive increases of δₙ treated as divergence

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.horizon_override is not None and not self.horizon_override > 0:
            raise ValueError(f"horizon_override must be > 0, got {self.horizon_override}")


@dataclass
class IterationRecord:
    n: int
    delta: float
    ratio: float
    z_max: float
    truncation_rate: float


@dataclass
class SolveReport:
    """Outcome of a local or global solve."""
    run_id: str = ""
    status: str = "pending"                 # converged, max_iters, diverged, failed
    certificate: str = CERTIFIED
    iterates: int = 0
    diffs: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    history: List[IterationRecord] = field(default_factory=list)
    z_max: float = 0.0
    truncation_rate: float = 0.0
    y0: List[float] = field(default_factory=list)
    z0: List[float] = field(default_factory=list)
    horizon: float = 0.0
    c_loc: float = 0.0
    z_bound: float = 0.0
    message: str = ""
    oracle_error: Optional[float] = None
    intervals: List[Tuple[float, float, float]] = field(default_factory=list)   # (start, end, Z-bound)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def summary(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "converged": self.converged,
            "certificate": self.certificate,
            "iterates": self.iterates,
            "final_delta": self.diffs[-1] if self.diffs else math.nan,
            "final_ratio": self.ratios[-1] if self.ratios else math.nan,
            "z_max": self.z_max,
            "truncation_rate": self.truncation_rate,
            "horizon": self.horizon,
            "c_loc": self.c_loc,
            "z_bound": self.z_bound,
            "oracle_error": self.oracle_error if self.oracle_error is not None else math.nan,
            **{f"y0_{i + 1}": v for i, v in enumerate(self.y0)},
            **{f"z0_{i + 1}": v for i, v in enumerate(self.z0)},
            "message": self.message,
        }

    def to_frame(self) -> pd.DataFrame:
        """Key/value rows for CSV output."""
        return pd.DataFrame(list(self.summary().items()), columns=["field", "value"])

    def format_text(self) -> str:
        items = self.summary()
        width = max(len(k) for k in items) + 2
        return "\n".join(f"{k:<{width}}{v:.10g}" if isinstance(v, float) else f"{k:<{width}}{v}"
                         for k, v in items.items())


def successive_diff(prev: Tuple[np.ndarray, np.ndarray], next_: Tuple[np.ndarray, np.ndarray],
                    grid: TimeGrid) -> float:
    """
    δ = max_k mean_p |ΔY_k|² + Σ_k mean_p |ΔZ_k|² Δt_k.

    Args:
        prev: (Y [n, K+1, l], Z [n, K, l, d]) of the previous iterate
        next_: the same for the new iterate
        grid: time grid of the iterates
    """
    y_prev, z_prev = prev
    y_next, z_next = next_
    if y_prev.shape != y_next.shape or z_prev.shape != z_next.shape:
        raise ValueError("iterates have mismatched shapes")
    dy = np.sum((y_next - y_prev) ** 2, axis=2).mean(axis=0)
    dz = np.sum((z_next - z_prev) ** 2, axis=(2, 3)).mean(axis=0)
    return float(dy.max() + np.sum(dz * grid.steps))


def _certify(horizon: float, limit: float, cfg: PicardConfig) -> str:
    if horizon <= limit * (1.0 + 1e-12):
        return CERTIFIED
    if cfg.horizon_override is not None:
        if horizon <= cfg.horizon_override * (1.0 + 1e-12):
            logger.warning(f"Horizon {horizon:.6g} exceeds certified {limit:.6g}; running under override")
            return OVERRIDE
        raise CertificateError(
            f"horizon {horizon:.6g} exceeds both the certified bound {limit:.6g} "
            f"and the override {cfg.horizon_override:.6g}"
        )
    if cfg.enforce_certificate:
        raise CertificateError(
            f"horizon {horizon:.6g} exceeds the certified local horizon {limit:.6g}; "
            f"pass a horizon override or disable certificate enforcement"
        )
    logger.warning(f"Horizon {horizon:.6g} exceeds certified {limit:.6g}; result is not theorem-covered")
    return NOT_COVERED


def solve_local(p: FbsdeProblem, grid: TimeGrid, n_paths: int, seed: int, cfg: Optional[PicardConfig] = None,
                terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                x_start: Optional[np.ndarray] = None,
                certificate_horizon: Optional[float] = None,
                run_id: str = "") -> Tuple[PathEnsemble, SolveReport]:
    """
    Picard iteration for the coupled FBSDE on `grid`.

    Args:
        p: problem
        grid: time grid (may start after 0 when pasting)
        n_paths: number of Monte Carlo paths
        seed: Brownian seed, frozen across iterations
        cfg: Picard configuration
        terminal: terminal map (defaults to p.h)
        x_start: per-path start states (defaults to p.x0)
        certificate_horizon: certified horizon (defaults to C_loc of p)
        run_id: label carried into the report

    Returns:
        (ensemble with X, Y, Z of the last iterate, SolveReport)
    """
    cfg = cfg or PicardConfig()
    bounds = compute_bounds(p, c1=cfg.c1, n_cap=1)
    limit = bounds.C_loc if certificate_horizon is None else certificate_horizon
    report = SolveReport(run_id=run_id, horizon=grid.horizon, c_loc=limit)
    report.certificate = _certify(grid.horizon, limit, cfg)

    terminal = terminal or p.h
    radius = cfg.backward.resolved_radius(p)
    report.z_bound = radius
    generator = truncate_generator(p.g, radius, cfg.backward.truncation_mode)

    dW = sample_brownian(grid, n_paths, p.dims.d, seed)
    ens = PathEnsemble(n_paths=n_paths, grid=grid, dW=dW, seed=seed)
    K, l, d = grid.K, p.dims.l, p.dims.d
    Y_prev = np.zeros((n_paths, K + 1, l))
    Z_prev = np.zeros((n_paths, K, l, d))
    result: Optional[BackwardResult] = None
    increases = 0

    logger.info(f"Picard solve {run_id or p.name}: horizon={grid.horizon:.6g}, K={K}, "
                f"paths={n_paths}, certificate={report.certificate}")

    for n in range(cfg.max_iters):
        y_path = Y_prev
        try:
            X = forward_euler(p, grid, dW, lambda k, x: y_path[:, k, :], x_start=x_start)
            ens.X = X
            result = backward_sweep(p, ens, cfg.backward, terminal, generator=generator)
        except (NonFiniteStateError, FloatingPointError, OverflowError) as e:
            report.status = "diverged"
            report.message = f"iteration {n}: {e}"
            logger.warning(f"Picard iteration blew up: {report.message}")
            break

        delta = successive_diff((Y_prev, Z_prev), (result.Y, result.Z), grid)
        previous = report.diffs[-1] if report.diffs else None
        ratio = math.nan if previous is None else (delta / previous if previous > 0 else 0.0)
        report.diffs.append(delta)
        if previous is not None:
            report.ratios.append(ratio)
        report.history.append(IterationRecord(n, delta, ratio, result.max_z, result.truncation_rate))
        report.iterates = n + 1
        ens.Y, ens.Z = result.Y, result.Z
        Y_prev, Z_prev = result.Y, result.Z
        logger.debug(f"Picard iteration {n}: delta={delta:.4g}, ratio={ratio:.4g}")

        if not math.isfinite(delta):
            report.status = "diverged"
            report.message = f"non-finite successive difference at iteration {n}"
            break
        if delta <= cfg.tol:
            report.status = "converged"
            break
        increases = increases + 1 if previous is not None and delta > previous else 0
        if increases >= cfg.divergence_window:
            report.status = "diverged"
            report.message = f"successive differences increased {increases} times in a row"
            break
    else:
        report.status = "max_iters"
        report.message = f"no convergence within {cfg.max_iters} iterations (last delta {report.diffs[-1]:.4g})"

    if result is not None:
        report.z_max = result.max_z
        report.truncation_rate = result.truncation_rate
        report.y0 = [float(v) for v in ens.Y[:, 0, :].mean(axis=0)] if ens.Y is not None else []
        report.z0 = [float(v) for v in ens.Z[:, 0].reshape(n_paths, -1).mean(axis=0)] if ens.Z is not None else []
        ens.sweep = result
    if report.converged:
        logger.info(f"Converged after {report.iterates} iterations, Y0={report.y0}")
        if report.truncation_rate > 0.01:
            logger.warning(f"Truncation active on {report.truncation_rate:.2%} of samples")
    else:
        logger.warning(f"Picard solve did not converge: {report.status} ({report.message})")
    return ens, report


def _require_decoupled_drift(p: FbsdeProblem):
    x = np.repeat(p.x0[None, :], 2, axis=0)
    y = np.zeros((2, p.dims.l))
    y[1] = 1.0
    drift = np.asarray(p.b(0.0, x, y), dtype=float)
    if not np.array_equal(drift[0], drift[1]):
        raise ProblemConfigError(f"{p.name}: the pure-BSDE solve needs a drift that does not depend on y")


def _pathwise(values: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Terminal map returning stored per-path values; the states are ignored."""
    def terminal(x: np.ndarray) -> np.ndarray:
        return values
    return terminal


def solve_bsde(p: FbsdeProblem, K: int, n_paths: int, seed: int, cfg: Optional[BackwardConfig] = None,
               enforce_certificate: bool = True, n_cap: Optional[int] = None,
               run_id: str = "") -> Tuple[PathEnsemble, SolveReport]:
    """
    Pure-BSDE solve: X runs with Y frozen at zero, then one backward sweep per schedule piece.

    [0, T] is cut from T backward into pieces of length Δₙ and the generator on the
    n-th piece is clamped at 2ⁿQ; a configured truncation radius replaces every bound.
    The result is theorem-covered when ΣΔₙ reaches T (T <= C_bsde is the one-piece case).

    Args:
        p: problem whose drift does not depend on y
        K: total time steps, shared out over the pieces by length
        n_paths: number of Monte Carlo paths
        seed: Brownian seed
        cfg: regression/truncation configuration
        enforce_certificate: raise CertificateError when the schedule falls short of T
        n_cap: Δₙ schedule cap (defaults to settings.schedule_cap)
        run_id: label carried into the report

    Returns:
        (ensemble with X, Y, Z, SolveReport)
    """
    cfg = cfg or BackwardConfig()
    _require_decoupled_drift(p)
    bounds = compute_bounds(p, n_cap=n_cap)
    T = p.horizon
    report = SolveReport(run_id=run_id, horizon=T, c_loc=bounds.C_bsde)
    if bounds.global_certificate_N is not None:
        report.certificate = CERTIFIED
    else:
        reached = sum(bounds.delta_schedule)
        if enforce_certificate:
            raise CertificateError(
                f"horizon {T:.6g} is not covered by the BSDE schedule: {len(bounds.delta_schedule)} terms "
                f"sum to {reached:.6g}; disable certificate enforcement to run anyway"
            )
        logger.warning(f"BSDE schedule reaches only {reached:.6g} < {T:.6g}; result is not theorem-covered")
        report.certificate = NOT_COVERED

    pieces = bsde_intervals(T, bounds.delta_schedule, bounds.Q)
    if cfg.truncation_radius is not None:
        pieces = [(a, b, cfg.truncation_radius) for a, b, _ in pieces]
    report.intervals = pieces
    report.z_bound = max(radius for _, _, radius in pieces)
    grids = [make_grid(b, max(1, round(K * (b - a) / T)), t0=a) for a, b, _ in pieces]
    grid = TimeGrid.concat(grids)

    dW = sample_brownian(grid, n_paths, p.dims.d, seed)
    ens = PathEnsemble(n_paths=n_paths, grid=grid, dW=dW, seed=seed)
    ens.X = forward_euler(p, grid, dW, zero_source(p.dims.l))
    logger.info(f"BSDE solve {run_id or p.name}: horizon={T:.6g}, {len(pieces)} piece(s), K={grid.K}, "
                f"paths={n_paths}, certificate={report.certificate}")

    Y = np.empty((n_paths, grid.K + 1, p.dims.l))
    Z = np.empty((n_paths, grid.K, p.dims.l, p.dims.d))
    diagnostics, value_maps = [], []
    terminal = p.h
    end = grid.K
    try:
        for (_, _, radius), piece_grid in zip(reversed(pieces), reversed(grids)):
            start = end - piece_grid.K
            piece = PathEnsemble(n_paths=n_paths, grid=piece_grid, dW=dW[:, start:end], seed=seed,
                                 X=ens.X[:, start:end + 1])
            result = backward_sweep(p, piece, replace(cfg, truncation_radius=radius), terminal)
            Y[:, start:end + 1] = result.Y
            Z[:, start:end] = result.Z
            diagnostics = [replace(s, k=s.k + start) for s in result.diagnostics] + diagnostics
            value_maps = result.value_maps + value_maps
            terminal = _pathwise(result.Y[:, 0, :].copy())
            end = start
    except (NonFiniteStateError, FloatingPointError, OverflowError) as e:
        report.status = "diverged"
        report.message = str(e)
        logger.warning(f"BSDE sweep blew up: {e}")
        return ens, report

    ens.Y, ens.Z = Y, Z
    ens.sweep = BackwardResult(Y=Y, Z=Z, diagnostics=diagnostics, value_maps=value_maps,
                               radius=report.z_bound)
    report.status = "converged"
    report.iterates = 1
    report.z_max = ens.sweep.max_z
    report.truncation_rate = ens.sweep.truncation_rate
    report.y0 = [float(v) for v in ens.y0()]
    report.z0 = [float(v) for v in Z[:, 0].reshape(n_paths, -1).mean(axis=0)]
    report.message = f"{len(pieces)} schedule piece(s)"
    logger.info(f"BSDE solve done: Y0={report.y0}")
    return ens, report
