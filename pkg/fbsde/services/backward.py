"""
Backward Sweep Service
Least-squares Monte Carlo solution of the backward equation on a fixed forward ensemble.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from ..exceptions import NonFiniteStateError, RegressionError
from ..models.problem import FbsdeProblem
from ..utils.bounds import TRUNCATION_MODES, TruncatedGenerator, truncate_generator, z_bound_M
from .simulation import PathEnsemble

logger = logging.getLogger(__name__)

BASIS_KINDS = ("polynomial", "partition")
MIN_PATHS_PER_FEATURE = 10
DEFAULT_RIDGE_PER_PATH = 1e-8


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial (total degree) or local-partition (indicator) features of the state."""
    kind: str = "polynomial"
    degree: int = 2
    bins: int = 8

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"basis kind must be one of {BASIS_KINDS}, got '{self.kind}'")
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")

    def n_features(self, m: int) -> int:
        if self.kind == "polynomial":
            return math.comb(m + self.degree, self.degree)
        return self.bins ** m

    def fit(self, x: np.ndarray) -> "FeatureMap":
        """Freeze centering/scaling (or bin edges) on a sample of states."""
        x = np.asarray(x, dtype=float)
        m = x.shape[1]
        if self.kind == "polynomial":
            center = x.mean(axis=0)
            scale = x.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
            monomials = [combo for deg in range(self.degree + 1)
                         for combo in itertools.combinations_with_replacement(range(m), deg)]
            return FeatureMap(self, center=center, scale=scale, monomials=tuple(monomials))
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        return FeatureMap(self, center=lo, scale=np.where(hi > lo, hi - lo, 1.0))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature map x -> [n, nFeat] with frozen normalization."""
    basis: RegressionBasis
    center: np.ndarray
    scale: np.ndarray
    monomials: Tuple[Tuple[int, ...], ...] = ()

    @property
    def n_features(self) -> int:
        return self.basis.n_features(self.center.size)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        n = u.shape[0]
        if self.basis.kind == "polynomial":
            columns = [np.prod(u[:, list(combo)], axis=1) if combo else np.ones(n) for combo in self.monomials]
            return np.stack(columns, axis=1)
        bins = self.basis.bins
        cell = np.clip(np.floor(u * bins).astype(int), 0, bins - 1)
        flat = np.ravel_multi_index(tuple(cell.T), (bins,) * u.shape[1])
        features = np.zeros((n, bins ** u.shape[1]))
        features[np.arange(n), flat] = 1.0
        return features


def fit_conditional_expectation(features: np.ndarray, targets: np.ndarray,
                                ridge: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimize ||features·β − targets||² + ridge·||β||².

    Args:
        features: design matrix [n, p]
        targets: [n] or [n, q]
        ridge: nonnegative regularization

    Returns:
        (coefficients [p] or [p, q], fitted values with the shape of targets)
    """
    F = np.asarray(features, dtype=float)
    T = np.asarray(targets, dtype=float)
    vector = T.ndim == 1
    if vector:
        T = T[:, None]
    if F.shape[0] != T.shape[0]:
        raise ValueError(f"features have {F.shape[0]} rows but targets have {T.shape[0]}")
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")

    n_feat = F.shape[1]
    if ridge == 0.0:
        coef, _, rank, _ = scipy.linalg.lstsq(F, T)
        if rank < n_feat:
            raise RegressionError(
                f"singular regression: feature matrix has rank {rank} < {n_feat}; "
                f"use ridge > 0 or a smaller basis"
            )
    else:
        gram = F.T @ F + ridge * np.eye(n_feat)
        coef = scipy.linalg.solve(gram, F.T @ T, assume_a="pos")
    fitted = F @ coef
    if vector:
        return coef[:, 0], fitted[:, 0]
    return coef, fitted


@dataclass(eq=False)
class FittedRegression:
    """A fitted conditional-expectation map x -> [n, q]."""
    feature_map: Optional[FeatureMap]
    coef: Optional[np.ndarray]
    constant: Optional[np.ndarray] = None   # degenerate ensembles: plain mean

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.constant is not None:
            return np.broadcast_to(self.constant, (x.shape[0], self.constant.size)).copy()
        return self.feature_map(x) @ self.coef


def _generator_step(generator: Callable, t: float, x: np.ndarray, y_hat: np.ndarray, z: np.ndarray,
                    dt: float, inner_iters: int) -> np.ndarray:
    # y* <- ŷ + g(y*) dt, inner_iters times, then one explicit update
    y_star = y_hat
    for _ in range(inner_iters):
        y_star = y_hat + generator(t, x, y_star, z) * dt
    return y_hat + generator(t, x, y_star, z) * dt


@dataclass(eq=False)
class StepValueMap:
    """x -> Y_k(x) for one backward step: regression mean plus generator term."""
    t: float
    dt: float
    mean_fit: FittedRegression
    z_fit: FittedRegression
    generator: TruncatedGenerator
    inner_iters: int
    l: int
    d: int

    def control(self, x: np.ndarray) -> np.ndarray:
        return self.z_fit.predict(x).reshape(-1, self.l, self.d)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return _generator_step(self.generator, self.t, x, self.mean_fit.predict(x), self.control(x),
                               self.dt, self.inner_iters)


@dataclass
class BackwardConfig:
    """Configuration for one backward sweep"""
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    truncation_mode: str = "radial"            # radial, smooth or off
    truncation_radius: Optional[float] = None  # None: M from the problem's constants
    inner_iters: int = 2                       # semi-implicit substitutions in y
    ridge: Optional[float] = None              # None: 1e-8 * n_paths

    def __post_init__(self):
        if self.truncation_mode not in TRUNCATION_MODES:
            raise ValueError(f"truncation_mode must be one of {TRUNCATION_MODES}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.inner_iters < 0:
            raise ValueError(f"inner_iters must be >= 0, got {self.inner_iters}")

    def resolved_ridge(self, n_paths: int) -> float:
        return DEFAULT_RIDGE_PER_PATH * n_paths if self.ridge is None else self.ridge

    def resolved_radius(self, p: FbsdeProblem) -> float:
        return z_bound_M(p.constants, p.dims) if self.truncation_radius is None else self.truncation_radius


@dataclass
class StepDiagnostics:
    k: int
    t: float
    truncation_rate: float
    max_z: float
    cond_number: float
    degenerate: bool


@dataclass(eq=False)
class BackwardResult:
    """Y [n, K+1, l], Z [n, K, l, d], per-step diagnostics and value maps."""
    Y: np.ndarray
    Z: np.ndarray
    diagnostics: List[StepDiagnostics]
    value_maps: List[StepValueMap]
    radius: float

    @property
    def truncation_rate(self) -> float:
        if not self.diagnostics:
            return 0.0
        return float(np.mean([d.truncation_rate for d in self.diagnostics]))

    @property
    def max_z(self) -> float:
        return max((d.max_z for d in self.diagnostics), default=0.0)

    def diagnostics_frame(self) -> pd.DataFrame:
        rows = [(d.k, d.t, d.truncation_rate, d.max_z, d.cond_number) for d in self.diagnostics]
        frame = pd.DataFrame(rows, columns=["k", "t", "truncation_rate", "maxZ", "cond_number_estimate"])
        return frame.sort_values("k", kind="stable").reset_index(drop=True)


def _is_degenerate(x: np.ndarray) -> bool:
    return bool(np.all(np.ptp(x, axis=0) == 0.0))


def backward_sweep(p: FbsdeProblem, ens: PathEnsemble, cfg: BackwardConfig,
                   terminal: Callable[[np.ndarray], np.ndarray],
                   generator: Optional[TruncatedGenerator] = None) -> BackwardResult:
    """
    One backward LSMC sweep on the forward states in `ens`.

    Args:
        p: problem supplying the generator
        ens: ensemble with X filled
        cfg: regression/truncation configuration
        terminal: Y_K = terminal(X_K)
        generator: pre-built truncated generator (default: from cfg)

    Returns:
        BackwardResult
    """
    if ens.X is None:
        raise ValueError("backward_sweep needs simulated forward states")
    X, dW, grid = ens.X, ens.dW, ens.grid
    n, K, l, d = X.shape[0], grid.K, p.dims.l, p.dims.d
    radius = cfg.resolved_radius(p)
    if generator is None:
        generator = truncate_generator(p.g, radius, cfg.truncation_mode)
    ridge = cfg.resolved_ridge(n)
    n_feat = cfg.basis.n_features(p.dims.m)

    Y = np.empty((n, K + 1, l))
    Z = np.empty((n, K, l, d))
    Y[:, K, :] = np.asarray(terminal(X[:, K, :]), dtype=float).reshape(n, l)
    if not np.all(np.isfinite(Y[:, K, :])):
        raise NonFiniteStateError(f"non-finite terminal value at step {K}", step=K)

    diagnostics: List[StepDiagnostics] = []
    value_maps: List[Optional[StepValueMap]] = [None] * K
    steps = grid.steps

    for k in range(K - 1, -1, -1):
        t, dt = float(grid.times[k]), float(steps[k])
        xk, y_next, dw = X[:, k, :], Y[:, k + 1, :], dW[:, k, :]

        if _is_degenerate(xk):
            y_mean = y_next.mean(axis=0)
            z_mean = ((y_next - y_mean)[:, :, None] * dw[:, None, :]).mean(axis=0).reshape(-1) / dt
            mean_fit = FittedRegression(None, None, constant=y_mean)
            z_fit = FittedRegression(None, None, constant=z_mean)
            cond = 1.0
        else:
            if n < MIN_PATHS_PER_FEATURE * n_feat:
                raise RegressionError(
                    f"{n} paths are too few for {n_feat} regression features "
                    f"(need at least {MIN_PATHS_PER_FEATURE * n_feat}); add paths or shrink the basis"
                )
            feature_map = cfg.basis.fit(xk)
            F = feature_map(xk)
            coef_y, y_hat = fit_conditional_expectation(F, y_next, ridge)
            increments = ((y_next - y_hat)[:, :, None] * dw[:, None, :]).reshape(n, l * d) / dt
            coef_z, _ = fit_conditional_expectation(F, increments, ridge)
            mean_fit = FittedRegression(feature_map, coef_y)
            z_fit = FittedRegression(feature_map, coef_z)
            cond = float(np.linalg.cond(F.T @ F + ridge * np.eye(F.shape[1])))

        step_map = StepValueMap(t, dt, mean_fit, z_fit, generator, cfg.inner_iters, l, d)
        y_hat = mean_fit.predict(xk)
        zk = step_map.control(xk)
        Y[:, k, :] = _generator_step(generator, t, xk, y_hat, zk, dt, cfg.inner_iters)
        Z[:, k] = zk

        if not (np.all(np.isfinite(Y[:, k, :])) and np.all(np.isfinite(zk))):
            raise NonFiniteStateError(f"non-finite backward value at step {k} (t={t:.6g})", step=k)

        z_norms = np.sqrt(np.sum(zk * zk, axis=(1, 2)))
        diagnostics.append(StepDiagnostics(
            k=k, t=t,
            truncation_rate=float(np.mean(generator.activity(zk))),
            max_z=float(z_norms.max()),
            cond_number=cond,
            degenerate=mean_fit.constant is not None,
        ))
        value_maps[k] = step_map

    diagnostics.reverse()
    logger.debug(f"Backward sweep done: K={K}, max|Z|={max(s.max_z for s in diagnostics):.4g}")
    return BackwardResult(Y=Y, Z=Z, diagnostics=diagnostics, value_maps=value_maps, radius=radius)
