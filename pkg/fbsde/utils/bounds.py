"""
Closed-form solvability constants and generator truncations
Z-bounds, local horizons, the Δₙ schedule, decoupling constants and the pasting grid.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from ..models.problem import AssumptionConstants, Dimensions, FbsdeProblem, GrowthFn

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)
BISECTION_RTOL = 1e-10
TRUNCATION_MODES = ("radial", "smooth", "off")


def _quotient(numerator: float, denominator: float) -> float:
    """numerator / denominator, with a zero denominator meaning no constraint."""
    if denominator == 0.0:
        return math.inf
    return numerator / denominator


def _safe_exp(value: float) -> float:
    try:
        return math.exp(value)
    except OverflowError:
        return math.inf


def z_bound_M(constants: "AssumptionConstants", dims: "Dimensions") -> float:
    """Local Z-bound M = 4 λ2 k5 sqrt(d l)."""
    return 4.0 * constants.lambda2 * constants.k5 * math.sqrt(dims.d * dims.l)


def malliavin_bound_Q(constants: "AssumptionConstants") -> float:
    """Pure-BSDE Z-bound Q = sqrt(2 Σ_j (Σ_i A_ij² + Σ_i ∫q_ij²))."""
    A = constants.A_array
    q = constants.q_array
    if A.shape != q.shape:
        raise ValueError(f"A has shape {A.shape} but q_integrals has shape {q.shape}")
    return math.sqrt(2.0 * float(np.sum(A ** 2 + q)))


def bsde_local_horizon(B: float, rho: "GrowthFn", Q: float) -> float:
    """Horizon on which the pure BSDE is solvable with |Z| <= Q."""
    r = float(rho(Q))
    return LOG2 / (2.0 * B + r * r + 1.0)


def local_horizon_C1(constants: "AssumptionConstants", dims: "Dimensions") -> float:
    """
    Step-1 horizon min(k5²/k3², log2/k1, λ2/(k2 M), log2/(2k4 + ρ(M)² + 1)).

    Terms with a zero denominator are dropped.
    """
    c = constants
    M = z_bound_M(c, dims)
    rho_m = float(c.rho(M))
    terms = (
        _quotient(c.k5 ** 2, c.k3 ** 2),
        _quotient(LOG2, c.k1),
        _quotient(c.lambda2, c.k2 * M),
        LOG2 / (2.0 * c.k4 + rho_m ** 2 + 1.0),
    )
    return min(terms)


def contraction_horizon_C2(constants: "AssumptionConstants", dims: "Dimensions", c1: float = 4.0,
                           cap: float = 1e6) -> float:
    """
    Largest T with 2T²k1² <= 1/2 and 8(c1+1) e^{βT} (k5² + T) T² k2² <= 1/2.

    β = 2ρ(M)² + k3² + 2k4. Returns math.inf when neither condition binds
    below `cap`.
    """
    if not c1 > 0:
        raise ValueError(f"c1 must be positive, got {c1}")
    c = constants
    M = z_bound_M(c, dims)
    beta = 2.0 * float(c.rho(M)) ** 2 + c.k3 ** 2 + 2.0 * c.k4

    def second(T: float) -> float:
        return 8.0 * (c1 + 1.0) * _safe_exp(beta * T) * (c.k5 ** 2 + T) * T ** 2 * c.k2 ** 2

    limits = []
    if c.k1 > 0:
        limits.append(1.0 / (2.0 * c.k1))
    if c.k2 > 0:
        hi = 1.0
        while second(hi) <= 0.5:
            hi *= 2.0
            if hi > cap:
                break
        if hi <= cap:
            lo = 0.0
            while hi - lo > BISECTION_RTOL * hi:
                mid = 0.5 * (lo + hi)
                if second(mid) <= 0.5:
                    lo = mid
                else:
                    hi = mid
            limits.append(lo)

    if not limits:
        return math.inf
    horizon = min(limits)
    return horizon if horizon <= cap else math.inf


def local_horizon(constants: "AssumptionConstants", dims: "Dimensions", c1: float = 4.0,
                  cap: float = 1e6) -> float:
    """C_loc = min(C1, C2)."""
    return min(local_horizon_C1(constants, dims), contraction_horizon_C2(constants, dims, c1, cap))


def delta_schedule(B: float, rho: "GrowthFn", Q: float, T: float, n_cap: int) -> Tuple[List[float], Optional[int]]:
    """
    Horizons Δₙ = log2 / (2B + ρ(2ⁿQ)² + 1) until their sum reaches T.

    Args:
        B: y-Lipschitz constant of the generator
        rho: z-modulus
        Q: Malliavin Z-bound
        T: target horizon
        n_cap: maximum number of terms

    Returns:
        (schedule, N) with N the first index whose partial sum is >= T,
        or None when the cap is hit or the terms underflow first
    """
    if n_cap < 1:
        raise ValueError(f"n_cap must be >= 1, got {n_cap}")
    deltas: List[float] = []
    total = 0.0
    for n in range(n_cap):
        r = rho.dyadic(n, Q)
        delta = LOG2 / (2.0 * B + r * r + 1.0)
        if not delta > 0.0:
            logger.debug(f"Δₙ underflowed at n={n}; partial sum stalls at {total}")
            break
        deltas.append(delta)
        total += delta
        if total >= T:
            return deltas, n
    return deltas, None


def decoupling_lipschitz_K5(constants: "AssumptionConstants", dims: "Dimensions", T: float) -> float:
    """Lipschitz constant of the decoupling field on [0, T]."""
    c = constants
    l = dims.l
    growth = _safe_exp(c.k1 * T)
    exponent = (c.k2 * c.k3 * T * growth + c.k4 + c.k2 * c.k5 * growth) * l * T
    return math.sqrt(l) * growth * (c.k5 + T * c.k3) * l * _safe_exp(exponent)


def smooth_clamp(a, M: float):
    """
    C¹ saturation h̃_M: identity on [-M, M], quadratic blend to ±(M+1) on M <= |a| <= M+2.
    """
    if M < 0:
        raise ValueError(f"M must be >= 0, got {M}")
    a = np.asarray(a, dtype=float)
    upper = (-M * M + 2.0 * M * a - a * (a - 4.0)) / 4.0
    lower = (M * M + 2.0 * M * a + a * (a + 4.0)) / 4.0
    out = np.where(
        a > M + 2.0, M + 1.0,
        np.where(a > M, upper,
                 np.where(a >= -M, a,
                          np.where(a >= -(M + 2.0), lower, -(M + 1.0)))),
    )
    return float(out) if out.ndim == 0 else out


def radial_clamp(z, R: float) -> np.ndarray:
    """Project z (one l×d matrix or a batch [n, l, d]) onto the Frobenius ball of radius R."""
    if R < 0:
        raise ValueError(f"R must be >= 0, got {R}")
    z = np.asarray(z, dtype=float)
    norms = np.sqrt(np.sum(z * z, axis=(-2, -1), keepdims=True))
    scale = np.where(norms > R, R / np.where(norms > 0.0, norms, 1.0), 1.0)
    return z * scale


class TruncatedGenerator:
    """
    Generator g̃(t, x, y, z) = g(t, x, y, clamp(z)).

    Also reports which samples the clamp altered.
    """

    def __init__(self, g: Callable, radius: float, mode: str = "radial"):
        if mode not in TRUNCATION_MODES:
            raise ValueError(f"truncation mode must be one of {TRUNCATION_MODES}, got '{mode}'")
        if radius < 0:
            raise ValueError(f"truncation radius must be >= 0, got {radius}")
        self.g = g
        self.radius = float(radius)
        self.mode = mode

    def clamp(self, z: np.ndarray) -> np.ndarray:
        if self.mode == "radial":
            return radial_clamp(z, self.radius)
        if self.mode == "smooth":
            return smooth_clamp(z, self.radius)
        return z

    def activity(self, z: np.ndarray) -> np.ndarray:
        """Boolean mask over the batch: True where the clamp changes z."""
        z = np.asarray(z, dtype=float)
        if self.mode == "radial":
            return np.sqrt(np.sum(z * z, axis=(-2, -1))) > self.radius
        if self.mode == "smooth":
            return np.max(np.abs(z), axis=(-2, -1)) > self.radius
        return np.zeros(z.shape[:-2], dtype=bool)

    def __call__(self, t, x, y, z):
        return self.g(t, x, y, self.clamp(z))

    def __repr__(self):
        return f"TruncatedGenerator(mode={self.mode}, radius={self.radius})"


def truncate_generator(g: Callable, R: float, mode: str = "radial") -> TruncatedGenerator:
    """Wrap g with the radial (Frobenius) or smooth (entrywise) clamp of radius R."""
    return TruncatedGenerator(g, R, mode)


def pasting_grid(T: float, C_bar: float) -> List[float]:
    """0 = t₀ < t₁ < ... < t_{N+1} = T with tᵢ = i·C̄ and N = ⌊T/C̄⌋."""
    if not C_bar > 0:
        raise ValueError(f"C_bar must be positive, got {C_bar}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if math.isinf(C_bar):
        return [0.0, float(T)]
    N = math.floor(T / C_bar)
    times = [i * C_bar for i in range(N + 1)]
    if abs(times[-1] - T) <= 1e-12 * max(T, 1.0) and len(times) > 1:
        times[-1] = float(T)
    else:
        times.append(float(T))
    return times


@dataclass
class BoundsReport:
    """Every closed-form constant for one problem."""
    horizon: float
    c1: float
    M: float
    Q: float
    C1: float
    C2: float
    C_loc: float
    C_bsde: float          # pure-BSDE local horizon log2/(2B + ρ(Q)² + 1)
    K5: float
    M_bar: float
    C_bar: float
    pasting_grid: List[float] = field(default_factory=list)
    delta_schedule: List[float] = field(default_factory=list)
    global_certificate_N: Optional[int] = None

    SCALARS = ("horizon", "c1", "M", "Q", "C1", "C2", "C_loc", "C_bsde", "K5", "M_bar", "C_bar")

    @property
    def locally_covered(self) -> bool:
        return self.horizon <= self.C_loc

    def to_frame(self) -> pd.DataFrame:
        """One row per constant."""
        rows = [(name, float(getattr(self, name))) for name in self.SCALARS]
        rows.append(("pasting_intervals", float(len(self.pasting_grid) - 1)))
        rows.append(("global_certificate_N",
                     float(self.global_certificate_N) if self.global_certificate_N is not None else math.nan))
        return pd.DataFrame(rows, columns=["constant", "value"])

    def schedule_frame(self) -> pd.DataFrame:
        deltas = np.asarray(self.delta_schedule, dtype=float)
        return pd.DataFrame({
            "n": np.arange(len(deltas), dtype=int),
            "delta_n": deltas,
            "partial_sum": np.cumsum(deltas),
        })

    def format_text(self) -> str:
        width = max(len(name) for name in self.SCALARS) + 2
        lines = [f"{name:<{width}}{getattr(self, name):.10g}" for name in self.SCALARS]
        grid = ", ".join(f"{t:.6g}" for t in self.pasting_grid)
        lines.append(f"{'pasting':<{width}}[{grid}]")
        n_text = self.global_certificate_N if self.global_certificate_N is not None else "not found"
        lines.append(f"{'N':<{width}}{n_text} ({len(self.delta_schedule)} schedule terms)")
        return "\n".join(lines)


def compute_bounds(problem: "FbsdeProblem", c1: Optional[float] = None, n_cap: Optional[int] = None,
                   cap: Optional[float] = None) -> BoundsReport:
    """
    Compute every constant of `problem` at its horizon.

    Args:
        problem: the FBSDE instance
        c1: BDG constant (defaults to settings.bdg_constant)
        n_cap: Δₙ schedule cap (defaults to settings.schedule_cap)
        cap: search cap for C2 (defaults to settings.contraction_cap)

    Returns:
        BoundsReport
    """
    from ..config import get_settings

    settings = get_settings()
    c1 = settings.bdg_constant if c1 is None else c1
    n_cap = settings.schedule_cap if n_cap is None else n_cap
    cap = settings.contraction_cap if cap is None else cap

    constants, dims, T = problem.constants, problem.dims, problem.horizon
    M = z_bound_M(constants, dims)
    Q = malliavin_bound_Q(constants)
    C1 = local_horizon_C1(constants, dims)
    C2 = contraction_horizon_C2(constants, dims, c1, cap)
    K5 = decoupling_lipschitz_K5(constants, dims, T)

    pasted = replace(constants, k5=K5)
    M_bar = z_bound_M(pasted, dims)
    C_bar = local_horizon(pasted, dims, c1, cap)
    grid = pasting_grid(T, C_bar) if C_bar > 0 else [0.0, T]

    schedule, N = delta_schedule(constants.B, constants.rho, Q, T, n_cap)
    report = BoundsReport(
        horizon=T, c1=c1, M=M, Q=Q, C1=C1, C2=C2, C_loc=min(C1, C2),
        C_bsde=bsde_local_horizon(constants.B, constants.rho, Q),
        K5=K5, M_bar=M_bar, C_bar=C_bar,
        pasting_grid=grid, delta_schedule=schedule, global_certificate_N=N,
    )
    logger.debug(f"Bounds for {problem.name}: C_loc={report.C_loc:.6g}, M={M:.6g}, C_bar={C_bar:.6g}")
    return report


def bsde_intervals(T: float, deltas: Sequence[float], Q: float) -> List[Tuple[float, float, float]]:
    """
    (start, end, Z-bound) pieces of [0, T] laid out from T backward.

    The n-th piece from the right has length Δₙ and bound 2ⁿQ. When the schedule
    falls short of T or its terms become negligible, the remaining [0, ·] piece
    takes the next bound.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    pieces: List[Tuple[float, float, float]] = []
    right = float(T)
    for n, delta in enumerate(deltas):
        if delta <= 1e-12 * T:
            break
        left = right - delta
        if left <= 1e-12 * T:
            left = 0.0
        pieces.append((left, right, Q * 2.0 ** n))
        right = left
        if left == 0.0:
            break
    if right > 0.0:
        pieces.append((0.0, right, Q * 2.0 ** len(pieces)))
    return pieces[::-1]
