"""
Built-in FBSDE test problems
Closed-form or PDE-checkable instances with hand-derived assumption constants.
"""

import logging
import math
from typing import Any, Callable, Dict

import numpy as np

from ..exceptions import ProblemConfigError
from .problem import AssumptionConstants, Dimensions, FbsdeProblem, GrowthFn

logger = logging.getLogger(__name__)


def _positive(params: Dict[str, float], name: str) -> float:
    value = float(params[name])
    if not (math.isfinite(value) and value > 0):
        raise ProblemConfigError(f"parameter {name} must be > 0, got {value}")
    return value


def _finite(params: Dict[str, float], name: str) -> float:
    value = float(params[name])
    if not math.isfinite(value):
        raise ProblemConfigError(f"parameter {name} must be finite, got {value}")
    return value


def delay_counterexample(k: float = 1.0, T: float = 1.0, x0: float = 0.0, eps_terminal: float = 0.0) -> FbsdeProblem:
    """
    X' = Y, Y' = -kX with Y_T = eps * X_T.

    Deterministic (sigma = 0); solvable for T*sqrt(k) < pi/2 when eps = 0 and
    degenerate at the threshold.
    """
    params = {"k": k, "T": T, "x0": x0, "eps_terminal": eps_terminal}
    k = _positive(params, "k")
    T = _positive(params, "T")
    x0 = _finite(params, "x0")
    eps = _finite(params, "eps_terminal")

    constants = AssumptionConstants(
        k1=0.0, k2=1.0, k3=k, k4=0.0, k5=abs(eps),
        lambda1=1.0, lambda2=0.0,
        rho=GrowthFn("constant", 0.0),
        A=((0.0,),), q_integrals=((0.0,),),
    )
    return FbsdeProblem(
        dims=Dimensions(1, 1, 1),
        horizon=T,
        x0=np.array([x0]),
        b=lambda t, x, y: np.array(y, dtype=float),
        sigma=lambda t: np.zeros((1, 1)),
        g=lambda t, x, y, z: k * x,
        h=lambda x: eps * x,
        constants=constants,
        g_shape="diagonal",
        name="delay_counterexample",
        source={"builtin": "delay_counterexample", "params": params},
    )


def linear_decoupled(alpha: float = 0.5, T: float = 0.3, x0: float = 1.0) -> FbsdeProblem:
    """dX = dW, Y_T = X_T, g = alpha * y; Y_t = exp(alpha (T - t)) X_t."""
    params = {"alpha": alpha, "T": T, "x0": x0}
    alpha = _finite(params, "alpha")
    T = _positive(params, "T")
    x0 = _finite(params, "x0")

    constants = AssumptionConstants(
        k4=abs(alpha), k5=1.0,
        lambda2=1.0, lambda3=1.0,
        rho=GrowthFn("constant", 0.0),
        B=abs(alpha), A=((1.0,),), q_integrals=((0.0,),),
    )
    return FbsdeProblem(
        dims=Dimensions(1, 1, 1),
        horizon=T,
        x0=np.array([x0]),
        b=lambda t, x, y: np.zeros_like(x),
        sigma=lambda t: np.ones((1, 1)),
        g=lambda t, x, y, z: alpha * y,
        h=lambda x: np.array(x, dtype=float),
        constants=constants,
        g_shape="diagonal",
        name="linear_decoupled",
        source={"builtin": "linear_decoupled", "params": params},
    )


def martingale(T: float = 1.0, x0: float = 1.0) -> FbsdeProblem:
    """dX = dW, Y_T = X_T, g = 0; Y_t = X_t, Z = 1."""
    params = {"T": T, "x0": x0}
    T = _positive(params, "T")
    x0 = _finite(params, "x0")

    constants = AssumptionConstants(
        k5=1.0, lambda2=1.0, lambda3=1.0,
        rho=GrowthFn("constant", 0.0),
        A=((1.0,),), q_integrals=((0.0,),),
    )
    return FbsdeProblem(
        dims=Dimensions(1, 1, 1),
        horizon=T,
        x0=np.array([x0]),
        b=lambda t, x, y: np.zeros_like(x),
        sigma=lambda t: np.ones((1, 1)),
        g=lambda t, x, y, z: np.zeros_like(y),
        h=lambda x: np.array(x, dtype=float),
        constants=constants,
        g_shape="diagonal",
        name="martingale",
        source={"builtin": "martingale", "params": params},
    )


def superquadratic_power(c: float = 1.0, p: float = 2.0, T: float = 0.02, x0: float = 0.5,
                         amplitude: float = 0.5) -> FbsdeProblem:
    """
    Decoupled problem with generator g(z) = c (z + sign(z)|z|^(p+1)/(p+1)).

    g' = c(1 + |z|^p), so the z-modulus is rho(x) = c(1 + x^p); the terminal
    h(x) = amplitude * sin(x) keeps |Z| <= amplitude.
    """
    params = {"c": c, "p": p, "T": T, "x0": x0, "amplitude": amplitude}
    c = _positive(params, "c")
    p = _positive(params, "p")
    T = _positive(params, "T")
    x0 = _finite(params, "x0")
    a = _positive(params, "amplitude")

    def g(t, x, y, z):
        zz = z[:, :, 0]
        return c * (zz + np.sign(zz) * np.abs(zz) ** (p + 1.0) / (p + 1.0))

    constants = AssumptionConstants(
        k5=a,
        lambda2=1.0, lambda3=1.0, lambda4=1.0, lambda5=a,
        rho=GrowthFn("power", c, p),
        A=((a,),), q_integrals=((0.0,),),
        global_conditions=True,
    )
    return FbsdeProblem(
        dims=Dimensions(1, 1, 1),
        horizon=T,
        x0=np.array([x0]),
        b=lambda t, x, y: np.zeros_like(x),
        sigma=lambda t: np.ones((1, 1)),
        g=g,
        h=lambda x: a * np.sin(x),
        constants=constants,
        g_shape="diagonal",
        name="superquadratic_power",
        source={"builtin": "superquadratic_power", "params": params},
    )


def coupled_2d_gamma(gamma=((1.0, 0.5), (0.0, 1.0)), a=(0.2, -0.1), c=(0.3, 0.1),
                     coupling: float = 0.1, T: float = 0.2, x0: float = 0.0) -> FbsdeProblem:
    """
    Two-dimensional linear problem that is diagonal only after conjugation by Gamma.

    With G = gamma: g(y, z) = G^-1 diag(a) G y + G^-1 diag(c) G z,
    h(x) = G^-1 (sin x, tanh(x)/2), b(x, y) = coupling * (G y)_1, sigma = 1.
    gamma_conjugate(p, G) turns it into the diagonal problem
    g~ = (a_i y_i + c_i z_i)_i, h~ = (sin x, tanh(x)/2), b~ = coupling * y_1.
    """
    G = np.asarray(gamma, dtype=float)
    if G.shape != (2, 2):
        raise ProblemConfigError(f"gamma must be 2x2, got shape {G.shape}")
    if abs(np.linalg.det(G)) < 1e-12:
        raise ProblemConfigError("gamma must be invertible")
    a_vec = np.asarray(a, dtype=float).reshape(2)
    c_vec = np.asarray(c, dtype=float).reshape(2)
    params = {"gamma": G.tolist(), "a": a_vec.tolist(), "c": c_vec.tolist(),
              "coupling": coupling, "T": T, "x0": x0}
    coupling = _finite(params, "coupling")
    T = _positive(params, "T")
    x0 = _finite(params, "x0")

    G_inv = np.linalg.inv(G)
    y_map = G_inv @ np.diag(a_vec) @ G
    z_map = G_inv @ np.diag(c_vec) @ G
    norm_g = np.linalg.norm(G, 2)
    norm_inv = np.linalg.norm(G_inv, 2)
    kappa = norm_g * norm_inv

    def b(t, x, y):
        return coupling * (y @ G[0])[:, None]

    def g(t, x, y, z):
        return y @ y_map.T + z[:, :, 0] @ z_map.T

    def h(x):
        base = np.concatenate([np.sin(x), 0.5 * np.tanh(x)], axis=1)
        return base @ G_inv.T

    h_lip = math.sqrt(1.0 + 0.25)
    constants = AssumptionConstants(
        k1=0.0, k2=abs(coupling) * float(np.linalg.norm(G[0])), k3=0.0,
        k4=kappa * float(np.max(np.abs(a_vec))),
        k5=norm_inv * h_lip,
        lambda1=abs(coupling) * float(np.linalg.norm(G[0])),
        lambda2=1.0, lambda3=1.0,
        lambda4=kappa * float(max(np.max(np.abs(a_vec)), np.max(np.abs(c_vec)))),
        lambda5=norm_inv * h_lip,
        rho=GrowthFn("constant", kappa * float(np.max(np.abs(c_vec)))),
        B=kappa * float(np.max(np.abs(a_vec))),
        A=tuple((norm_inv * h_lip,) for _ in range(2)),
        q_integrals=((0.0,), (0.0,)),
    )
    return FbsdeProblem(
        dims=Dimensions(1, 2, 1),
        horizon=T,
        x0=np.array([x0]),
        b=b,
        sigma=lambda t: np.ones((1, 1)),
        g=g,
        h=h,
        constants=constants,
        g_shape="general",
        name="coupled_2d_gamma",
        source={"builtin": "coupled_2d_gamma", "params": params},
    )


BUILTIN_PROBLEMS: Dict[str, Callable[..., FbsdeProblem]] = {
    "delay_counterexample": delay_counterexample,
    "linear_decoupled": linear_decoupled,
    "martingale": martingale,
    "superquadratic_power": superquadratic_power,
    "coupled_2d_gamma": coupled_2d_gamma,
}


def builtin_problem(name: str, params: Dict[str, Any] = None) -> FbsdeProblem:
    """
    Construct a built-in problem by name.

    Args:
        name: one of BUILTIN_PROBLEMS
        params: keyword parameters of the chosen constructor

    Returns:
        Fully populated FbsdeProblem
    """
    if name not in BUILTIN_PROBLEMS:
        raise ProblemConfigError(f"unknown builtin problem '{name}', expected one of {sorted(BUILTIN_PROBLEMS)}")
    params = dict(params or {})
    try:
        problem = BUILTIN_PROBLEMS[name](**params)
    except TypeError as e:
        raise ProblemConfigError(f"bad parameters for {name}: {e}") from e
    logger.debug(f"Built {problem.describe()} with params {params}")
    return problem
