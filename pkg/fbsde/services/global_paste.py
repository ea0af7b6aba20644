"""
Global Pasting Service
Solves on consecutive subintervals of length at most C̄, fits the decoupling field
θ(tᵢ, ·) backward in time and glues the pieces; also the Γ-conjugation of a problem.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..exceptions import GlobalConditionError, ProblemConfigError, RegressionError
from ..models.problem import AssumptionConstants, FbsdeProblem
from ..utils.bounds import compute_bounds, pasting_grid
from .backward import (
    MIN_PATHS_PER_FEATURE,
    FittedRegression,
    RegressionBasis,
    StepValueMap,
    backward_sweep,
    fit_conditional_expectation,
)
from .picard import CERTIFIED, NOT_COVERED, PicardConfig, SolveReport, solve_local
from .simulation import PathEnsemble, TimeGrid, forward_euler, make_grid, sample_brownian, zero_source

logger = logging.getLogger(__name__)

LIPSCHITZ_PAIRS = 1000


# ---------------------------------------------------------------------------
# Decoupling field
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DecouplingMap:
    """θ(t, ·) at one pasting time."""
    t: float
    evaluate: Callable[[np.ndarray], np.ndarray]
    fit: Optional[FittedRegression] = None        # None for the terminal map h
    lipschitz_estimate: float = 0.0
    fit_domain: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(np.asarray(x, dtype=float))


def fit_decoupling(x: np.ndarray, y: np.ndarray, basis: RegressionBasis, ridge: float = 0.0,
                   seed: int = 0, t: float = 0.0) -> DecouplingMap:
    """
    Least-squares fit of θ from states x [n, m] and values y [n, l] at one time.

    Args:
        x: states
        y: values
        basis: regression basis
        ridge: regularization of the fit
        seed: seed for the Lipschitz pair sampling
        t: time label of the fitted map

    Returns:
        DecouplingMap with lipschitz_estimate = max sampled |θ(x)−θ(x')|/|x−x'|
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    n = x.shape[0]
    domain = (x.min(axis=0), x.max(axis=0))

    if np.all(np.ptp(x, axis=0) == 0.0):
        fit = FittedRegression(None, None, constant=y.mean(axis=0))
        return DecouplingMap(t, fit.predict, fit, 0.0, domain)

    n_feat = basis.n_features(x.shape[1])
    if n < MIN_PATHS_PER_FEATURE * n_feat:
        raise RegressionError(
            f"{n} samples are too few to fit {n_feat} features; increase the path count or the design spread"
        )
    feature_map = basis.fit(x)
    try:
        coef, _ = fit_conditional_expectation(feature_map(x), y, ridge)
    except RegressionError as e:
        raise RegressionError(f"{e}; the design sample is too concentrated, increase design_spread") from e
    fit = FittedRegression(feature_map, coef)

    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, LIPSCHITZ_PAIRS)
    j = rng.integers(0, n, LIPSCHITZ_PAIRS)
    dx = np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=1))
    keep = dx > 0
    if np.any(keep):
        dy = np.sqrt(np.sum((fit.predict(x[i[keep]]) - fit.predict(x[j[keep]])) ** 2, axis=1))
        lipschitz = float(np.max(dy / dx[keep]))
    else:
        lipschitz = 0.0
    return DecouplingMap(t, fit.predict, fit, lipschitz, domain)


@dataclass(eq=False)
class DecouplingField:
    """θ at pasting times plus the per-step value maps of the interval sweeps."""
    times: List[float]
    maps: List[DecouplingMap]
    dense_grids: List[TimeGrid] = field(default_factory=list)
    dense_maps: List[List[StepValueMap]] = field(default_factory=list)

    def at(self, t: float) -> DecouplingMap:
        for time, theta in zip(self.times, self.maps):
            if abs(time - t) <= 1e-12:
                return theta
        raise KeyError(f"{t} is not a pasting time")

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        """θ(t, x) at a pasting time or at any step of an interval grid."""
        for time, theta in zip(self.times, self.maps):
            if abs(time - t) <= 1e-12:
                return theta(x)
        for grid, step_maps in zip(self.dense_grids, self.dense_maps):
            if grid.t0 < t < grid.T:
                return step_maps[grid.index_of(t)](x)
        raise KeyError(f"θ is not available at t={t}")

    def to_frame(self) -> pd.DataFrame:
        """(time, kind, component, coefficient index, value) rows for the fitted maps."""
        rows = []
        for theta in self.maps:
            if theta.fit is None:
                rows.append((theta.t, "terminal", -1, -1, math.nan))
            elif theta.fit.constant is not None:
                for comp, value in enumerate(theta.fit.constant):
                    rows.append((theta.t, "constant", comp, 0, float(value)))
            else:
                coef = np.asarray(theta.fit.coef).reshape(theta.fit.coef.shape[0], -1)
                for comp in range(coef.shape[1]):
                    for index in range(coef.shape[0]):
                        rows.append((theta.t, theta.fit.feature_map.basis.kind, comp, index, float(coef[index, comp])))
        return pd.DataFrame(rows, columns=["time", "kind", "component", "coefficient", "value"])

    def table_frame(self, nodes: int = 101) -> pd.DataFrame:
        """Tabulated (t, x, θ) for m = 1 over each map's fit domain."""
        frames = []
        for theta in self.maps:
            if theta.fit_domain is None:
                continue
            lo, hi = theta.fit_domain
            if lo.size != 1:
                raise ValueError("tabulation is only available for m = 1")
            xs = np.linspace(float(lo[0]), float(hi[0]), nodes) if hi[0] > lo[0] else np.array([float(lo[0])])
            values = theta(xs[:, None])
            frame = pd.DataFrame({"t": theta.t, "x": xs})
            for comp in range(values.shape[1]):
                frame[f"theta{comp + 1}"] = values[:, comp]
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["t", "x"])


@dataclass(eq=False)
class GlobalSolution:
    ensemble: Optional[PathEnsemble]
    decoupling: Optional[DecouplingField]
    report: SolveReport
    interval_reports: List[SolveReport] = field(default_factory=list)
    interface_jumps: List[float] = field(default_factory=list)
    y0_field: List[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.ensemble, self.decoupling, self.report))


def _check_global_conditions(p: FbsdeProblem, samples: int = 256, seed: int = 0) -> List[str]:
    """Return the reasons the global theorem does not cover p (empty when covered)."""
    reasons = []
    c = p.constants
    if p.g_shape != "diagonal":
        reasons.append("generator is not diagonal in z")
    if not c.lambda3 > 0:
        reasons.append("lambda3 is not declared positive")
    else:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((samples, p.dims.m))
        for t in np.linspace(0.0, p.horizon, 8):
            s = p.sigma_at(float(t))
            quad = np.einsum("ni,ij,nj->n", v, s @ s.T, v)
            if np.any(quad < c.lambda3 * np.sum(v * v, axis=1) * (1.0 - 1e-9)):
                reasons.append(f"sigma violates the lambda3 non-degeneracy bound at t={t:.6g}")
                break
    if not c.global_conditions:
        reasons.append("growth bounds lambda1, lambda4, lambda5 are not declared")
    return reasons


def _mean_path(p: FbsdeProblem, times: List[float], steps_per_interval: int) -> List[np.ndarray]:
    """Drift-only propagation of x0 with Y frozen at zero, sampled at the pasting times."""
    means = [p.x0.copy()]
    x = p.x0[None, :].copy()
    for a, b in zip(times[:-1], times[1:]):
        grid = make_grid(b, steps_per_interval, t0=a)
        X = forward_euler(p, grid, np.zeros((1, grid.K, p.dims.d)), zero_source(p.dims.l), x_start=x)
        x = X[:, -1, :]
        means.append(x[0].copy())
    return means


def _interval_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def solve_global(p: FbsdeProblem, per_interval_K: int, n_paths: int, seed: int,
                 cfg: Optional[PicardConfig] = None, design_spread: Optional[float] = None,
                 pasting_step: Optional[float] = None,
                 require_global_conditions: bool = True) -> GlobalSolution:
    """
    Global solve by pasting local solutions along θ.

    Args:
        p: problem
        per_interval_K: time steps per pasting interval
        n_paths: paths per interval solve and for the glued sweep
        seed: master seed
        cfg: Picard configuration shared by all interval solves
        design_spread: std of the Gaussian design around the propagated mean
            (default 3 λ2 sqrt(T))
        pasting_step: overrides C̄ as the pasting step
        require_global_conditions: raise if the global theorem's hypotheses fail;
            otherwise run and flag the result as not theorem-covered

    Returns:
        GlobalSolution (unpacks as ensemble, field, report)
    """
    cfg = cfg or PicardConfig()
    reasons = _check_global_conditions(p)
    if reasons and require_global_conditions:
        raise GlobalConditionError("global solve preconditions failed: " + "; ".join(reasons))
    for reason in reasons:
        logger.warning(f"{p.name}: {reason}; global result is not theorem-covered")

    bounds = compute_bounds(p, c1=cfg.c1, n_cap=1)
    step = bounds.C_bar if pasting_step is None else pasting_step
    if not step > 0:
        raise GlobalConditionError(f"pasting step must be positive, got {step:.6g}; "
                                   f"pass an explicit pasting step")
    times = pasting_grid(p.horizon, step)
    spacing = np.diff(times)
    assert np.all(spacing <= step * (1.0 + 1e-12)), "pasting grid spacing exceeds the step"
    spread = 3.0 * p.constants.lambda2 * math.sqrt(p.horizon) if design_spread is None else design_spread
    logger.info(f"Global solve {p.name}: C_bar={bounds.C_bar:.6g}, step={step:.6g}, "
                f"{len(times) - 1} interval(s), design spread={spread:.4g}")

    backward_cfg = cfg.backward
    if backward_cfg.truncation_radius is None:
        backward_cfg = replace(backward_cfg, truncation_radius=bounds.M_bar)
    interval_cfg = replace(cfg, backward=backward_cfg)

    if len(times) == 2:
        grid = make_grid(p.horizon, per_interval_K)
        ens, report = solve_local(p, grid, n_paths, seed, interval_cfg, run_id="interval-1",
                                  certificate_horizon=step)
        if reasons:
            report.certificate = NOT_COVERED
        if not report.converged:
            report.message = f"interval 1 [0, {p.horizon:.6g}] did not converge: {report.message}"
            return GlobalSolution(ens, None, report, [report])
        theta0 = fit_decoupling(ens.X[:, 0, :], ens.Y[:, 0, :], backward_cfg.basis,
                                backward_cfg.resolved_ridge(n_paths), seed, t=0.0)
        terminal = DecouplingMap(p.horizon, p.h, None, p.constants.k5)
        field_ = DecouplingField([0.0, p.horizon], [theta0, terminal], [grid], [ens.sweep.value_maps])
        return GlobalSolution(ens, field_, report, [report], [], list(report.y0))

    means = _mean_path(p, times, per_interval_K)
    maps: List[Optional[DecouplingMap]] = [None] * len(times)
    maps[-1] = DecouplingMap(p.horizon, p.h, None, p.constants.k5)
    grids: List[Optional[TimeGrid]] = [None] * (len(times) - 1)
    dense: List[Optional[List[StepValueMap]]] = [None] * (len(times) - 1)
    interval_reports: List[SolveReport] = []

    for i in range(len(times) - 1, 0, -1):
        a, b = times[i - 1], times[i]
        grid = make_grid(b, per_interval_K, t0=a)
        interval_seed = _interval_seed(seed, i)
        if a == 0.0:
            x_start = None
        else:
            design = np.random.default_rng(_interval_seed(seed, 10_000 + i))
            x_start = means[i - 1] + spread * design.standard_normal((n_paths, p.dims.m))
        terminal = maps[i]
        run_id = f"interval-{i}"
        ens_i, report_i = solve_local(p, grid, n_paths, interval_seed, interval_cfg,
                                      terminal=terminal, x_start=x_start,
                                      certificate_horizon=step, run_id=run_id)
        interval_reports.insert(0, report_i)
        if not report_i.converged:
            message = f"interval {i} [{a:.6g}, {b:.6g}] did not converge: {report_i.message}"
            logger.error(message)
            failed = SolveReport(run_id="global", status="failed", certificate=report_i.certificate,
                                 horizon=p.horizon, c_loc=step, z_bound=bounds.M_bar, message=message)
            failed.history = [r for rep in interval_reports for r in rep.history]
            return GlobalSolution(None, None, failed, interval_reports)
        maps[i - 1] = fit_decoupling(ens_i.X[:, 0, :], ens_i.Y[:, 0, :], backward_cfg.basis,
                                     backward_cfg.resolved_ridge(n_paths), interval_seed, t=a)
        grids[i - 1] = grid
        dense[i - 1] = ens_i.sweep.value_maps
        logger.info(f"Interval {i} [{a:.6g}, {b:.6g}] solved in {report_i.iterates} iterations; "
                    f"Lipschitz(θ)={maps[i - 1].lipschitz_estimate:.4g} (K5={bounds.K5:.4g})")

    field_ = DecouplingField(list(times), maps, grids, dense)
    glued = TimeGrid.concat(grids)
    ens = _glued_sweep(p, glued, field_, n_paths, seed, backward_cfg)

    report = SolveReport(run_id="global", horizon=p.horizon, c_loc=step, z_bound=bounds.M_bar)
    report.status = "converged"
    report.certificate = NOT_COVERED if reasons else CERTIFIED
    report.iterates = sum(r.iterates for r in interval_reports)
    report.history = [r for rep in interval_reports for r in rep.history]
    report.diffs = [r.delta for r in report.history]
    report.ratios = [r.ratio for r in report.history if not math.isnan(r.ratio)]
    report.z_max = ens.sweep.max_z
    report.truncation_rate = ens.sweep.truncation_rate
    report.y0 = [float(v) for v in ens.y0()]
    report.z0 = [float(v) for v in ens.Z[:, 0].reshape(n_paths, -1).mean(axis=0)]

    jumps = []
    for t in times[1:-1]:
        k = glued.index_of(t)
        jumps.append(float(np.mean(np.abs(ens.Y[:, k, :] - field_.at(t)(ens.X[:, k, :])))))
    y0_field = [float(v) for v in field_.at(0.0)(p.x0[None, :])[0]]
    report.message = f"{len(times) - 1} intervals; max interface jump {max(jumps, default=0.0):.3g}"
    logger.info(f"Global solve done: Y0={report.y0}, θ(0, x0)={y0_field}, jumps={jumps}")
    return GlobalSolution(ens, field_, report, interval_reports, jumps, y0_field)


def _glued_sweep(p: FbsdeProblem, grid: TimeGrid, field_: DecouplingField, n_paths: int, seed: int,
                 backward_cfg) -> PathEnsemble:
    """Forward pass from x0 with Y = θ(t, X), then one backward sweep on the glued grid."""
    dW = sample_brownian(grid, n_paths, p.dims.d, seed)
    ens = PathEnsemble(n_paths=n_paths, grid=grid, dW=dW, seed=seed)
    times = grid.times

    def y_source(k: int, x: np.ndarray) -> np.ndarray:
        return field_.evaluate(float(times[k]), x)

    ens.X = forward_euler(p, grid, dW, y_source)
    result = backward_sweep(p, ens, backward_cfg, p.h)
    ens.Y, ens.Z, ens.sweep = result.Y, result.Z, result
    return ens


# ---------------------------------------------------------------------------
# Γ-transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GammaTransform:
    """Invertible l×l matrix Γ with its inverse."""
    Gamma: np.ndarray
    GammaInv: np.ndarray = None

    def __post_init__(self):
        G = np.array(self.Gamma, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ProblemConfigError(f"Gamma must be square, got shape {G.shape}")
        try:
            inv = np.linalg.inv(G) if self.GammaInv is None else np.array(self.GammaInv, dtype=float)
        except np.linalg.LinAlgError as e:
            raise ProblemConfigError("Gamma is singular") from e
        if np.linalg.norm(G @ inv - np.eye(G.shape[0])) > 1e-10:
            raise ProblemConfigError("GammaInv is not the inverse of Gamma")
        object.__setattr__(self, "Gamma", G)
        object.__setattr__(self, "GammaInv", inv)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.Gamma, 2))

    @property
    def inv_norm(self) -> float:
        return float(np.linalg.norm(self.GammaInv, 2))

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Γ y for y [n, l]."""
        return np.asarray(y, dtype=float) @ self.Gamma.T

    def apply_inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.GammaInv.T

    def apply_z(self, z: np.ndarray) -> np.ndarray:
        """Γ z for z [n, l, d]."""
        return np.einsum("ij,njk->nik", self.Gamma, z)

    def apply_inverse_z(self, z: np.ndarray) -> np.ndarray:
        return np.einsum("ij,njk->nik", self.GammaInv, z)


def _rescale_constants(c: AssumptionConstants, G: GammaTransform) -> AssumptionConstants:
    g_norm, inv_norm = G.norm, G.inv_norm
    kappa = g_norm * inv_norm
    column_A = np.sqrt(np.sum(c.A_array ** 2, axis=0))
    column_q = np.sum(c.q_array, axis=0)
    l = G.Gamma.shape[0]
    return replace(
        c,
        k2=c.k2 * inv_norm,
        k3=c.k3 * g_norm,
        k4=c.k4 * kappa,
        k5=c.k5 * g_norm,
        lambda1=c.lambda1 * max(1.0, inv_norm),
        lambda4=c.lambda4 * g_norm * max(1.0, inv_norm),
        lambda5=c.lambda5 * g_norm,
        K=c.K * kappa,
        rho=c.rho.rescaled(kappa, inv_norm),
        A=tuple(tuple(float(g_norm * v) for v in column_A) for _ in range(l)),
        q_integrals=tuple(tuple(float(g_norm ** 2 * v) for v in column_q) for _ in range(l)),
    )


def gamma_conjugate(p: FbsdeProblem, G: GammaTransform, g_shape: Optional[str] = None) -> FbsdeProblem:
    """
    Problem with h̃ = Γh, g̃(x, y, z) = Γ g(x, Γ⁻¹y, Γ⁻¹z), b̃(x, y) = b(x, Γ⁻¹y).

    Declared constants are rescaled conservatively by operator norms of Γ and Γ⁻¹.
    `g_shape` declares the shape of g̃ (default: that of p).
    """
    if G.Gamma.shape[0] != p.dims.l:
        raise ProblemConfigError(f"Gamma must be {p.dims.l}x{p.dims.l}, got {G.Gamma.shape}")
    b, g, h = p.b, p.g, p.h

    def b_tilde(t, x, y):
        return b(t, x, G.apply_inverse(y))

    def g_tilde(t, x, y, z):
        return G.apply(g(t, x, G.apply_inverse(y), G.apply_inverse_z(z)))

    def h_tilde(x):
        return G.apply(h(x))

    return replace(
        p,
        b=b_tilde,
        g=g_tilde,
        h=h_tilde,
        constants=_rescale_constants(p.constants, G),
        g_shape=g_shape or p.g_shape,
        name=f"{p.name}[gamma]",
    )
