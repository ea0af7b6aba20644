"""
Empirical assumption checks
Samples finite differences of b, sigma, g, h and compares them with the declared constants.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from ..utils.bounds import z_bound_M
from .problem import FbsdeProblem

logger = logging.getLogger(__name__)

SLACK = 0.01          # relative tolerance on declared constants
ZERO_ATOL = 1e-9      # numerator treated as zero against a zero bound


@dataclass
class ValidationRecord:
    """
    Worst sampled ratio for one assumption.

    max_ratio is the observed quantity divided by its declared bound, so 1.0 is tight.
    """
    assumption: str
    quantity: str
    max_ratio: float
    declared: float
    violated: bool
    note: str = ""


@dataclass
class ValidationReport:
    """All records from one validate_problem run."""
    problem: str
    samples: int
    seed: int
    records: List[ValidationRecord] = field(default_factory=list)

    @property
    def violations(self) -> List[ValidationRecord]:
        return [r for r in self.records if r.violated]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.records],
                            columns=["assumption", "quantity", "max_ratio", "declared", "violated", "note"])


def _norm(a: np.ndarray) -> np.ndarray:
    """Euclidean/Frobenius norm over all but the batch axis."""
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def _ratios(numerator: np.ndarray, bound: np.ndarray) -> np.ndarray:
    """numerator / bound per sample; a zero bound allows only a (numerically) zero numerator."""
    numerator = np.asarray(numerator, dtype=float)
    bound = np.asarray(bound, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = numerator / bound
    zero_bound = bound <= 0.0
    ratio = np.where(zero_bound & (numerator <= ZERO_ATOL), 0.0, ratio)
    ratio = np.where(zero_bound & (numerator > ZERO_ATOL), np.inf, ratio)
    return np.where(np.isnan(ratio), np.inf, ratio)


class _Sampler:
    """Deterministic draws of (t, x, y, z) test points on a box."""

    def __init__(self, problem: FbsdeProblem, samples: int, seed: int, box: float):
        self.rng = np.random.default_rng(seed)
        self.n = samples
        self.box = box
        self.problem = problem

    def states(self) -> np.ndarray:
        x0 = self.problem.x0
        return x0 + self.rng.uniform(-self.box, self.box, (self.n, self.problem.dims.m))

    def values(self) -> np.ndarray:
        return self.rng.uniform(-self.box, self.box, (self.n, self.problem.dims.l))

    def controls(self, radius: float) -> np.ndarray:
        """z uniformly oriented with |z| <= radius."""
        l, d = self.problem.dims.l, self.problem.dims.d
        direction = self.rng.standard_normal((self.n, l, d))
        norms = np.sqrt(np.sum(direction ** 2, axis=(1, 2), keepdims=True))
        norms = np.where(norms > 0, norms, 1.0)
        scale = radius * self.rng.uniform(0.0, 1.0, (self.n, 1, 1))
        return direction / norms * scale


def validate_problem(p: FbsdeProblem, samples: int = 10_000, seed: int = 0, box: float = 3.0,
                     z_box: Optional[float] = None, time_samples: int = 16) -> ValidationReport:
    """
    Check the declared constants of `p` against sampled finite differences.

    Args:
        p: problem to check (never mutated)
        samples: number of sampled point pairs per assumption
        seed: RNG seed; identical inputs give identical reports
        box: half-width of the x/y sampling box around x0 / 0
        z_box: radius of the z sampling ball (default max(2M, 2))
        time_samples: distinct times at which coefficients are compared

    Returns:
        ValidationReport with one record per assumption checked
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    c = p.constants
    M = z_bound_M(c, p.dims)
    z_radius = z_box if z_box is not None else max(2.0 * M, 2.0)
    sampler = _Sampler(p, samples, seed, box)
    report = ValidationReport(problem=p.name, samples=samples, seed=seed)
    # Coefficients are batched over paths at a single time; use a few shared times.
    t_grid = np.linspace(0.0, p.horizon, max(1, time_samples))

    def check(assumption: str, quantity: str, declared: float, compute: Callable[[float], np.ndarray]):
        try:
            ratios = [np.max(compute(float(t)), initial=0.0) for t in t_grid]
            worst = float(max(ratios))
            note = ""
        except Exception as e:
            worst, note = math.inf, f"evaluation failed: {e}"
        if math.isnan(worst):
            worst, note = math.inf, "non-finite evaluation"
        violated = worst > 1.0 + SLACK
        report.records.append(ValidationRecord(assumption, quantity, worst, declared, violated, note))
        if violated:
            logger.warning(f"{p.name}: {assumption} {quantity} ratio {worst:.4g} exceeds declared {declared}")

    x, x2 = sampler.states(), sampler.states()
    y, y2 = sampler.values(), sampler.values()
    z_any, z_any2 = sampler.controls(z_radius), sampler.controls(z_radius)
    z_small = sampler.controls(M)

    def finite(*arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite coefficient value")

    # Lipschitz and linear growth of b
    def a1_lipschitz(t):
        d1, d2 = p.b(t, x, y), p.b(t, x2, y2)
        finite(d1, d2)
        return _ratios(_norm(d1 - d2), c.k1 * _norm(x - x2) + c.k2 * _norm(y - y2))

    def a1_growth(t):
        value = p.b(t, x, y)
        finite(value)
        return _ratios(_norm(value), c.lambda1 * (1.0 + _norm(x) + _norm(y)))

    check("drift", "b Lipschitz (k1, k2)", max(c.k1, c.k2), a1_lipschitz)
    check("drift", "b growth (lambda1)", c.lambda1, a1_growth)

    # |sigma| <= lambda2
    def a2(t):
        s = p.sigma_at(t)
        finite(s)
        return _ratios(np.array([np.linalg.norm(s)]), np.array([c.lambda2]))

    check("diffusion", "sigma bound (lambda2)", c.lambda2, a2)

    # h Lipschitz
    def a3(t):
        h1, h2 = p.h(x), p.h(x2)
        finite(h1, h2)
        return _ratios(_norm(h1 - h2), c.k5 * _norm(x - x2))

    check("terminal", "h Lipschitz (k5)", c.k5, a3)

    # g: x-Lipschitz on |z| <= M, joint (y, z) modulus everywhere
    def a4_x(t):
        g1, g2 = p.g(t, x, y, z_small), p.g(t, x2, y, z_small)
        finite(g1, g2)
        return _ratios(_norm(g1 - g2), c.k3 * _norm(x - x2))

    def a4_yz(t):
        g1, g2 = p.g(t, x, y, z_any), p.g(t, x, y2, z_any2)
        finite(g1, g2)
        zmax = np.maximum(_norm(z_any), _norm(z_any2))
        bound = c.k4 * _norm(y - y2) + np.asarray(c.rho(zmax), dtype=float) * _norm(z_any - z_any2)
        return _ratios(_norm(g1 - g2), bound)

    check("generator", "g x-Lipschitz on |z|<=M (k3)", c.k3, a4_x)
    check("generator", "g (y, z) modulus (k4, rho)", c.k4, a4_yz)

    if p.g_shape == "diagonal":
        # component i of g depends on z only through row i
        def a4_diagonal(t):
            l = p.dims.l
            worst = np.zeros(x.shape[0])
            for i in range(l):
                z_mixed = z_any2.copy()
                z_mixed[:, i, :] = z_any[:, i, :]
                g1, g2 = p.g(t, x, y, z_any), p.g(t, x, y, z_mixed)
                finite(g1, g2)
                worst = np.maximum(worst, np.abs(g1[:, i] - g2[:, i]))
            return _ratios(worst, np.zeros_like(worst))

        check("generator-diagonal", "g^i depends on z only through row i", 0.0, a4_diagonal)

    # mixed differences
    def a5(t):
        mixed = p.g(t, x, y, z_any) - p.g(t, x2, y, z_any) - p.g(t, x, y2, z_any2) + p.g(t, x2, y2, z_any2)
        finite(mixed)
        bound = c.K * _norm(x - x2) * (_norm(y - y2) + _norm(z_any - z_any2))
        return _ratios(_norm(mixed), bound)

    check("mixed-difference", "mixed difference (K)", c.K, a5)

    # Non-degeneracy of sigma, checked whenever declared
    if c.lambda3 > 0:
        v = sampler.rng.standard_normal((samples, p.dims.m))

        def nondegenerate(t):
            s = p.sigma_at(t)
            quad = np.einsum("ni,ij,nj->n", v, s @ s.T, v)
            return _ratios(np.full(quad.shape, c.lambda3) * np.sum(v * v, axis=1), quad)

        check("nondegeneracy", "sigma non-degeneracy (lambda3)", c.lambda3, nondegenerate)

    if c.global_conditions:
        def growth_b(t):
            return _ratios(_norm(p.b(t, x, y)), c.lambda1 * (1.0 + _norm(y)))

        def growth_g(t):
            rho_z = np.asarray(c.rho(_norm(z_any)), dtype=float)
            return _ratios(_norm(p.g(t, x, y, z_any)), c.lambda4 * (1.0 + _norm(y) + rho_z * _norm(z_any)))

        def bound_h(t):
            return _ratios(_norm(p.h(x)), np.full(x.shape[0], c.lambda5))

        check("global-growth", "b growth in y (lambda1)", c.lambda1, growth_b)
        check("global-growth", "g growth (lambda4)", c.lambda4, growth_g)
        check("global-growth", "h bound (lambda5)", c.lambda5, bound_h)

    logger.info(f"Validated {p.name}: {len(report.records)} checks, {len(report.violations)} violations")
    return report
