"""
Oracle Service
Reference solutions for verification: the delay two-point boundary problem, linear BSDEs
and a 1-d finite-difference solver for the semilinear PDE of the decoupling field.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ..exceptions import PdeStabilityError, ProblemConfigError
from ..models.problem import FbsdeProblem

logger = logging.getLogger(__name__)

SINGULAR_RTOL = 1e-6
BLOWUP_FACTOR = 1e8


@dataclass(eq=False)
class OracleSolution:
    """
    Closed-form (X, Y, Z) of a reference problem.

    `value(t, x)` is Y at time t and state x (x defaults to the deterministic or
    mean state); evaluation is refused when `singular` is set.
    """
    name: str
    horizon: float
    value_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]]
    state_fn: Optional[Callable[[np.ndarray], np.ndarray]]
    control_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]]
    singular: bool = False
    params: Dict[str, Any] = field(default_factory=dict)
    note: str = ""

    @property
    def validity(self) -> Tuple[float, float]:
        return 0.0, self.horizon

    def _check(self, t) -> np.ndarray:
        if self.singular:
            raise ValueError(f"{self.name} is singular ({self.note}); no values available")
        t = np.asarray(t, dtype=float)
        lo, hi = self.validity
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError(f"t outside the validity domain [{lo}, {hi}]")
        return t

    def state(self, t) -> np.ndarray:
        return self.state_fn(self._check(t))

    def value(self, t, x=None) -> np.ndarray:
        t = self._check(t)
        x = self.state_fn(t) if x is None else np.asarray(x, dtype=float)
        return self.value_fn(t, x)

    def control(self, t, x=None) -> np.ndarray:
        t = self._check(t)
        x = self.state_fn(t) if x is None else np.asarray(x, dtype=float)
        return self.control_fn(t, x)

    def to_frame(self, times: Optional[Sequence[float]] = None, x=None) -> pd.DataFrame:
        """Columns t, X, Y, Z on `times` (default: 101 uniform points)."""
        if self.singular:
            return pd.DataFrame({"t": [], "X": [], "Y": [], "Z": []})
        times = np.linspace(0.0, self.horizon, 101) if times is None else np.asarray(times, dtype=float)
        states = self.state(times) if x is None else np.broadcast_to(np.asarray(x, dtype=float), times.shape)
        return pd.DataFrame({
            "t": times,
            "X": states,
            "Y": self.value(times, states),
            "Z": self.control(times, states),
        })


def delay_oracle(k: float, T: float, x0: float, eps_terminal: float = 0.0) -> OracleSolution:
    """
    Solution of X' = Y, Y' = -kX, X(0) = x0, Y(T) = eps X(T).

    X(t) = x0 cos(wt) + beta sin(wt), Y = X', Z = 0 with w = sqrt(k) and
    beta = x0 (eps cos wT + w sin wT) / (w cos wT - eps sin wT).
    """
    if not (k > 0 and T > 0):
        raise ProblemConfigError(f"k and T must be > 0, got k={k}, T={T}")
    omega = math.sqrt(k)
    eps = float(eps_terminal)
    params = {"k": k, "T": T, "x0": x0, "eps_terminal": eps}
    denominator = omega * math.cos(omega * T) - eps * math.sin(omega * T)

    if abs(denominator) < SINGULAR_RTOL * (omega + abs(eps)):
        note = f"w*T={omega * T:.12g} makes the boundary problem degenerate"
        logger.warning(f"delay oracle singular: {note}")
        return OracleSolution("delay", T, None, None, None, singular=True, params=params, note=note)

    beta = x0 * (eps * math.cos(omega * T) + omega * math.sin(omega * T)) / denominator

    def state(t):
        return x0 * np.cos(omega * t) + beta * np.sin(omega * t)

    def value(t, x):
        return -x0 * omega * np.sin(omega * t) + beta * omega * np.cos(omega * t)

    def control(t, x):
        return np.zeros_like(np.asarray(t, dtype=float))

    return OracleSolution("delay", T, value, state, control, params=params)


def linear_bsde_oracle(alpha: float, T: float, x0: float) -> OracleSolution:
    """Y(t, X_t) = exp(alpha (T - t)) X_t, Z = exp(alpha (T - t)) for g = alpha y, h = x, dX = dW."""
    if not T > 0:
        raise ProblemConfigError(f"T must be > 0, got {T}")
    alpha = float(alpha)

    def state(t):
        return np.full_like(np.asarray(t, dtype=float), float(x0))

    def value(t, x):
        return np.exp(alpha * (T - t)) * x

    def control(t, x):
        return np.exp(alpha * (T - np.asarray(t, dtype=float))) * np.ones_like(np.asarray(x, dtype=float))

    return OracleSolution("linear_bsde", T, value, state, control,
                          params={"alpha": alpha, "T": T, "x0": x0})


# ---------------------------------------------------------------------------
# Finite-difference PDE oracle
# ---------------------------------------------------------------------------

@dataclass
class PdeGridConfig:
    """Grid for the 1-d PDE oracle"""
    lower: Optional[float] = None      # None: x0 - padding * lambda2 * sqrt(T)
    upper: Optional[float] = None
    nodes: int = 401
    t_steps: int = 400
    padding: float = 6.0
    field_sweeps: int = 20             # frozen-field sweeps per step for a y-dependent drift
    field_tol: float = 1e-10           # sweeps stop once successive iterates agree to this (relative)

    def __post_init__(self):
        if self.nodes < 5:
            raise ValueError(f"nodes must be >= 5, got {self.nodes}")
        if self.t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {self.t_steps}")
        if self.field_sweeps < 1:
            raise ValueError(f"field_sweeps must be >= 1, got {self.field_sweeps}")
        if not self.field_tol > 0:
            raise ValueError(f"field_tol must be > 0, got {self.field_tol}")
        if self.lower is not None and self.upper is not None and not self.upper > self.lower:
            raise ValueError("upper must exceed lower")

    def bounds(self, p: FbsdeProblem) -> Tuple[float, float]:
        width = self.padding * p.constants.lambda2 * math.sqrt(p.horizon)
        if width <= 0:
            width = 1.0
        x0 = float(p.x0[0])
        lower = x0 - width if self.lower is None else self.lower
        upper = x0 + width if self.upper is None else self.upper
        return lower, upper


@dataclass(eq=False)
class PdeSolution:
    """θ tabulated on (times × xs) as values [t, x, l]."""
    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray
    field_sweeps: int = 1      # most frozen-field sweeps any time step needed

    def theta(self, t: float, x) -> np.ndarray:
        """θ(t, x) for x of shape [n] or [n, 1]; linear in t and x, returns [n, l]."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if not self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12:
            raise ValueError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        j = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2))
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        w = min(max(w, 0.0), 1.0)
        slab = (1.0 - w) * self.values[j] + w * self.values[j + 1]
        return np.stack([np.interp(x, self.xs, slab[:, i]) for i in range(slab.shape[1])], axis=1)

    def to_frame(self, time_slices: int = 21) -> pd.DataFrame:
        """Long format (t, x, theta1, ...) on about `time_slices` evenly spaced times."""
        stride = max(1, (len(self.times) - 1) // max(1, time_slices - 1))
        indices = sorted(set(range(0, len(self.times), stride)) | {len(self.times) - 1})
        frames = []
        for j in indices:
            frame = pd.DataFrame({"t": self.times[j], "x": self.xs})
            for i in range(self.values.shape[2]):
                frame[f"theta{i + 1}"] = self.values[j, :, i]
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def _implicit_matrix(nodes: int, r: float) -> sp.csc_matrix:
    # Interior: I - r D2; boundary rows: θ0 - 2θ1 + θ2 = 0 and its mirror.
    main = np.full(nodes, 1.0 + 2.0 * r)
    upper = np.full(nodes - 1, -r)
    lower = np.full(nodes - 1, -r)
    upper2 = np.zeros(nodes - 2)
    lower2 = np.zeros(nodes - 2)
    main[0] = main[-1] = 1.0
    upper[0] = -2.0
    lower[-1] = -2.0
    upper2[0] = 1.0
    lower2[-1] = 1.0
    return sp.diags([lower2, lower, main, upper, upper2], offsets=[-2, -1, 0, 1, 2], format="csc")


def _drift_depends_on_y(p: FbsdeProblem, X: np.ndarray, theta: np.ndarray) -> bool:
    base = np.asarray(p.b(p.horizon, X, theta), dtype=float)
    shifted = np.asarray(p.b(p.horizon, X, theta + 1.0), dtype=float)
    return not np.array_equal(base, shifted)


def pde_oracle(p: FbsdeProblem, grid: Optional[PdeGridConfig] = None) -> PdeSolution:
    """
    Solve θ_t + ½|σ|²θ_xx + b θ_x + g(t, x, θ, σθ_x) = 0, θ(T, ·) = h backward in time.

    Diffusion is implicit; the generator and θ_x are explicit in the later time level.
    A drift b(t, x, θ) that depends on y is frozen at the current iterate of the new
    level and the step is re-solved until two sweeps agree to `field_tol`.

    Args:
        p: problem with m = 1
        grid: spatial/temporal grid (default PdeGridConfig())

    Returns:
        PdeSolution on [0, T]

    Raises:
        PdeStabilityError: when the max norm blows up or the frozen-field
            iteration does not settle within `field_sweeps`
    """
    if p.dims.m != 1:
        raise ProblemConfigError(f"the PDE oracle needs m = 1, got m={p.dims.m}")
    grid = grid or PdeGridConfig()
    lower, upper = grid.bounds(p)
    xs = np.linspace(lower, upper, grid.nodes)
    dx = xs[1] - xs[0]
    times = np.linspace(0.0, p.horizon, grid.t_steps + 1)
    dt = times[1] - times[0]
    l = p.dims.l
    X = xs[:, None]

    values = np.empty((len(times), grid.nodes, l))
    theta = np.asarray(p.h(X), dtype=float).reshape(grid.nodes, l)
    values[-1] = theta
    scale = max(1.0, float(np.max(np.abs(theta))))
    coupled = _drift_depends_on_y(p, X, theta)
    most_sweeps = 1
    logger.info(f"PDE oracle {p.name}: x in [{lower:.4g}, {upper:.4g}] with {grid.nodes} nodes, "
                f"{grid.t_steps} time steps{', frozen-field drift' if coupled else ''}")

    cached_r, solver_matrix = None, None
    for j in range(len(times) - 2, -1, -1):
        t = float(times[j + 1])
        s = p.sigma_at(t)
        a = 0.5 * float(np.sum(s * s))
        r = a * dt / dx ** 2
        if r != cached_r:
            cached_r, solver_matrix = r, _implicit_matrix(grid.nodes, r)

        theta_x = np.gradient(theta, dx, axis=0, edge_order=2)
        z = theta_x[:, :, None] * s[0][None, None, :]
        source = np.asarray(p.g(t, X, theta, z), dtype=float).reshape(grid.nodes, l)
        explicit = theta + dt * source

        guess = theta
        for sweep in range(1, grid.field_sweeps + 1):
            drift = np.asarray(p.b(t, X, guess), dtype=float).reshape(grid.nodes)
            rhs = explicit + dt * drift[:, None] * theta_x
            rhs[0] = 0.0
            rhs[-1] = 0.0
            new = np.column_stack([spsolve(solver_matrix, rhs[:, i]) for i in range(l)])
            change = float(np.max(np.abs(new - guess)))
            guess = new
            if not coupled or (sweep > 1 and change <= grid.field_tol * max(1.0, float(np.max(np.abs(new))))):
                break
        else:
            raise PdeStabilityError(
                f"frozen-field drift did not settle within {grid.field_sweeps} sweeps at t={times[j]:.6g} "
                f"(last change {change:.3g}); use more time steps"
            )
        most_sweeps = max(most_sweeps, sweep)
        theta = guess

        peak = float(np.max(np.abs(theta)))
        if not math.isfinite(peak) or peak > BLOWUP_FACTOR * scale:
            raise PdeStabilityError(
                f"PDE solution blew up at t={times[j]:.6g} (max |θ| = {peak:.3g}); use more time steps"
            )
        values[j] = theta

    if coupled:
        logger.info(f"Frozen-field iteration used at most {most_sweeps} sweeps per step")
    return PdeSolution(times=times, xs=xs, values=values, field_sweeps=most_sweeps)


def oracle_for(p: FbsdeProblem) -> Optional[OracleSolution]:
    """Closed-form oracle matching a built-in problem, if there is one."""
    source = p.source or {}
    name, params = source.get("builtin"), dict(source.get("params", {}))
    x0 = float(p.x0[0])
    if name == "delay_counterexample":
        return delay_oracle(float(params.get("k", 1.0)), p.horizon, x0, float(params.get("eps_terminal", 0.0)))
    if name == "linear_decoupled":
        return linear_bsde_oracle(float(params.get("alpha", 0.5)), p.horizon, x0)
    if name == "martingale":
        return linear_bsde_oracle(0.0, p.horizon, x0)
    return None
