"""
Path Simulation Service
Time grids, reproducible Brownian ensembles and the forward Euler scheme for X.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..config import get_settings
from ..exceptions import NonFiniteStateError
from ..models.problem import FbsdeProblem
from ..utils.reporting import write_csv_atomic

logger = logging.getLogger(__name__)

YSource = Callable[[int, np.ndarray], np.ndarray]

MIN_PATHS_PER_TASK = 256


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times t₀ < t₁ < ... < t_K."""
    times: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        if times.size < 2:
            raise ValueError("a time grid needs at least two points")
        if not np.all(np.isfinite(times)):
            raise ValueError("grid times must be finite")
        if not np.all(np.diff(times) > 0):
            raise ValueError("grid times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def from_times(cls, times: Sequence[float]) -> "TimeGrid":
        return cls(np.asarray(times, dtype=float))

    @classmethod
    def concat(cls, grids: Sequence["TimeGrid"]) -> "TimeGrid":
        """Glue consecutive grids that share their boundary points."""
        pieces = [grids[0].times]
        for previous, grid in zip(grids, grids[1:]):
            if not np.isclose(previous.T, grid.t0, rtol=0.0, atol=1e-12):
                raise ValueError(f"grids do not join: {previous.T} vs {grid.t0}")
            pieces.append(grid.times[1:])
        return cls(np.concatenate(pieces))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    def index_of(self, t: float) -> int:
        """Index of the grid point equal to t (to 1e-12)."""
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12))
        if hits.size == 0:
            raise ValueError(f"time {t} is not a grid point")
        return int(hits[0])


def make_grid(T: float, K: int, t0: float = 0.0) -> TimeGrid:
    """Uniform grid with K steps on [t0, T]."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not T > t0:
        raise ValueError(f"grid end {T} must exceed its start {t0}")
    times = t0 + (T - t0) * (np.arange(K + 1, dtype=float) / K)
    times[-1] = T
    return TimeGrid(times)


@dataclass
class PathEnsemble:
    """Brownian increments and simulated (X, Y, Z) trajectories on a grid."""
    n_paths: int
    grid: TimeGrid
    dW: np.ndarray                   # [n, K, d]
    seed: int
    X: Optional[np.ndarray] = None   # [n, K+1, m]
    Y: Optional[np.ndarray] = None   # [n, K+1, l]
    Z: Optional[np.ndarray] = None   # [n, K, l, d]
    sweep: Optional[Any] = None      # last backward sweep result

    def y0(self) -> np.ndarray:
        """Ensemble mean of Y at the first grid point."""
        if self.Y is None:
            raise ValueError("ensemble has no Y yet")
        return self.Y[:, 0, :].mean(axis=0)

    def to_frame(self, paths: Optional[Sequence[int]] = None) -> pd.DataFrame:
        """Long-format trajectories: one row per (path, k)."""
        if self.X is None:
            raise ValueError("ensemble has no simulated states")
        paths = np.arange(self.n_paths) if paths is None else np.asarray(paths, dtype=int)
        K = self.grid.K
        n_sel = paths.size
        columns = {
            "path": np.repeat(paths, K + 1),
            "k": np.tile(np.arange(K + 1), n_sel),
            "t": np.tile(self.grid.times, n_sel),
        }
        X = self.X[paths]
        for i in range(X.shape[2]):
            columns[f"X{i + 1}"] = X[:, :, i].reshape(-1)
        if self.Y is not None:
            Y = self.Y[paths]
            for i in range(Y.shape[2]):
                columns[f"Y{i + 1}"] = Y[:, :, i].reshape(-1)
        if self.Z is not None:
            Z = self.Z[paths]
            padded = np.concatenate([Z, np.full((n_sel, 1) + Z.shape[2:], np.nan)], axis=1)
            for i in range(Z.shape[2]):
                for j in range(Z.shape[3]):
                    columns[f"Z{i + 1}{j + 1}"] = padded[:, :, i, j].reshape(-1)
        return pd.DataFrame(columns)


def _path_normals(seed: int, path: int, K: int, d: int) -> np.ndarray:
    # One Philox stream per (seed, path, component) read in step order, so entry (k, j)
    # does not depend on n_paths, d or later steps.
    out = np.empty((K, d))
    for j in range(d):
        key = np.random.SeedSequence(seed, spawn_key=(path, j))
        out[:, j] = np.random.Generator(np.random.Philox(key)).standard_normal(K)
    return out


def sample_brownian(grid: TimeGrid, n_paths: int, d: int, seed: int,
                    num_threads: Optional[int] = None) -> np.ndarray:
    """
    Brownian increments [n_paths, K, d] with N(0, Δtₖ) entries.

    Increment (p, k, j) depends only on (seed, p, k, j), so the result is
    independent of n_paths, of the thread count and of the other components.

    Args:
        grid: time grid
        n_paths: number of paths
        d: Brownian dimension
        seed: nonnegative integer seed
        num_threads: worker threads (defaults to settings.num_threads)

    Returns:
        Increment array
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if seed < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed}")

    K = grid.K
    out = np.empty((n_paths, K, d))
    workers = num_threads or get_settings().num_threads

    def fill(chunk: np.ndarray):
        for p in chunk:
            out[p] = _path_normals(seed, int(p), K, d)

    if workers <= 1 or n_paths < 2 * MIN_PATHS_PER_TASK:
        fill(np.arange(n_paths))
    else:
        n_tasks = min(4 * workers, max(1, n_paths // MIN_PATHS_PER_TASK))
        chunks = np.array_split(np.arange(n_paths), n_tasks)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(fill, chunks))

    out *= np.sqrt(grid.steps)[None, :, None]
    logger.debug(f"Sampled Brownian increments: {n_paths} paths x {K} steps x {d} (seed={seed})")
    return out


def forward_euler(p: FbsdeProblem, grid: TimeGrid, dW: np.ndarray, y_source: YSource,
                  x_start: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Euler scheme X_{k+1} = X_k + b(t_k, X_k, y_source(k, X_k)) Δt_k + σ(t_k) ΔW_k.

    Args:
        p: problem supplying b and sigma
        grid: time grid
        dW: increments [n, K, d]
        y_source: Y values [n, l] for step k and states [n, m]
        x_start: per-path start states [n, m] (defaults to p.x0 for all paths)

    Returns:
        States [n, K+1, m]
    """
    n, K, d = dW.shape
    m, l = p.dims.m, p.dims.l
    if K != grid.K:
        raise ValueError(f"increments have {K} steps but the grid has {grid.K}")
    if d != p.dims.d:
        raise ValueError(f"increments have dimension {d} but the problem has d={p.dims.d}")

    X = np.empty((n, K + 1, m))
    if x_start is None:
        X[:, 0, :] = p.x0
    else:
        X[:, 0, :] = np.asarray(x_start, dtype=float).reshape(n, m)

    steps = grid.steps
    for k in range(K):
        t = float(grid.times[k])
        xk = X[:, k, :]
        y = np.asarray(y_source(k, xk), dtype=float).reshape(n, l)
        drift = np.asarray(p.b(t, xk, y), dtype=float)
        X[:, k + 1, :] = xk + drift * steps[k] + dW[:, k, :] @ p.sigma_at(t).T
        finite = np.isfinite(X[:, k + 1, :]).all(axis=1)
        if not finite.all():
            path = int(np.flatnonzero(~finite)[0])
            raise NonFiniteStateError(f"non-finite forward state on path {path} at step {k + 1}",
                                      path=path, step=k + 1)
    return X


def zero_source(l: int) -> YSource:
    """Y-source returning zeros (decoupled pilot runs)."""
    def source(k: int, x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], l))
    return source


def dump_trajectories(ens: PathEnsemble, path, paths: Optional[List[int]] = None):
    """Write (path, k, t, X.., Y.., Z..) rows as CSV."""
    return write_csv_atomic(ens.to_frame(paths), path)
