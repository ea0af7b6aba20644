"""
FBSDE problem definitions
Coefficient maps with declared regularity constants, plus YAML/JSON problem configs.

Coefficients are evaluated in batches over paths:

    b(t, x[n, m], y[n, l])           -> [n, m]
    sigma(t)                          -> [m, d]
    g(t, x[n, m], y[n, l], z[n, l, d]) -> [n, l]
    h(x[n, m])                        -> [n, l]

Coefficient maps must be pure; problem objects are immutable and can be shared
across threads.
"""

import inspect
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
import yaml

from ..exceptions import ProblemConfigError

logger = logging.getLogger(__name__)

DriftFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
VolFn = Callable[[float], np.ndarray]
GeneratorFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
TerminalFn = Callable[[np.ndarray], np.ndarray]

G_SHAPES = ("general", "diagonal")


@dataclass(frozen=True)
class Dimensions:
    """State (m), value (l) and Brownian (d) dimensions."""
    m: int = 1
    l: int = 1
    d: int = 1

    def __post_init__(self):
        for name in ("m", "l", "d"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ProblemConfigError(f"dimension {name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class GrowthFn:
    """
    Nondecreasing modulus rho of the generator's z-Lipschitz bound.

    Kinds:
        constant: rho(x) = c
        power:    rho(x) = c * (1 + x**p)
        monomial: rho(x) = c * x**p
        log:      rho(x) = c * (1 + sqrt(log(1 + x)))
    """
    kind: str = "constant"
    c: float = 0.0
    p: float = 1.0

    KINDS = ("constant", "power", "monomial", "log")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ProblemConfigError(f"unknown growth kind '{self.kind}', expected one of {self.KINDS}")
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ProblemConfigError(f"growth coefficient c must be finite and >= 0, got {self.c}")
        if not (math.isfinite(self.p) and self.p >= 0):
            raise ProblemConfigError(f"growth exponent p must be finite and >= 0, got {self.p}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            if self.c == 0.0:
                value = np.zeros_like(x)
            elif self.kind == "constant":
                value = np.full_like(x, self.c)
            elif self.kind == "power":
                value = self.c * (1.0 + np.power(x, self.p))
            elif self.kind == "monomial":
                value = self.c * np.power(x, self.p)
            else:
                value = self.c * (1.0 + np.sqrt(np.log1p(x)))
        return float(value) if value.ndim == 0 else value

    def dyadic(self, n: int, q: float) -> float:
        """rho(2**n * q) without overflowing 2**n for the log kind."""
        if self.kind != "log" or q <= 0:
            with np.errstate(over="ignore"):
                return float(self(np.ldexp(float(q), int(n))))
        # log(1 + 2^n q) = n log2 + log q + log1p(2^-n / q)
        log_arg = n * math.log(2.0) + math.log(q) + math.log1p(math.ldexp(1.0 / q, -int(n)))
        return self.c * (1.0 + math.sqrt(log_arg))

    def rescaled(self, outer: float, inner: float) -> "GrowthFn":
        """A GrowthFn bounding outer * rho(inner * x) from above."""
        if outer < 0 or inner < 0:
            raise ProblemConfigError("rescaling factors must be nonnegative")
        if self.kind == "constant":
            return GrowthFn("constant", outer * self.c)
        if self.kind == "monomial":
            return GrowthFn("monomial", outer * self.c * inner ** self.p, self.p)
        if self.kind == "power":
            return GrowthFn("power", outer * self.c * max(1.0, inner ** self.p), self.p)
        # sqrt(log(1 + s x)) <= sqrt(log(1 + x)) + sqrt(log(max(1, s)))
        return GrowthFn("log", outer * self.c * (1.0 + math.sqrt(math.log(max(1.0, inner)))))


def _as_matrix(values, shape: Tuple[int, int], name: str) -> Tuple[Tuple[float, ...], ...]:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    if arr.shape != shape:
        raise ProblemConfigError(f"{name} must have shape {shape}, got {arr.shape}")
    return tuple(tuple(float(v) for v in row) for row in arr)


@dataclass(frozen=True)
class AssumptionConstants:
    """Declared regularity and growth constants of a problem."""
    # Lipschitz constants
    k1: float = 0.0        # b in x
    k2: float = 0.0        # b in y
    k3: float = 0.0        # g in x (for |z| <= M)
    k4: float = 0.0        # g in y
    k5: float = 0.0        # h in x
    # Growth and bound constants
    lambda1: float = 0.0   # |b| growth
    lambda2: float = 0.0   # |sigma| bound
    lambda3: float = 0.0   # sigma non-degeneracy
    lambda4: float = 0.0   # |g| growth
    lambda5: float = 0.0   # |h| bound
    K: float = 0.0         # mixed-difference constant
    rho: GrowthFn = field(default_factory=GrowthFn)
    # Pure-BSDE mode
    B: float = 0.0
    A: Tuple[Tuple[float, ...], ...] = ((0.0,),)
    q_integrals: Tuple[Tuple[float, ...], ...] = ((0.0,),)
    # Growth bounds lambda1, lambda4, lambda5 are declared
    global_conditions: bool = False

    SCALARS = ("k1", "k2", "k3", "k4", "k5", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "K", "B")

    def __post_init__(self):
        for name in self.SCALARS:
            value = getattr(self, name)
            if not (isinstance(value, (int, float, np.floating)) and math.isfinite(value) and value >= 0):
                raise ProblemConfigError(f"constant {name} must be finite and >= 0, got {value!r}")
            object.__setattr__(self, name, float(value))
        for name in ("A", "q_integrals"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ProblemConfigError(f"{name} must be a matrix, got shape {arr.shape}")
            if not (np.all(np.isfinite(arr)) and np.all(arr >= 0)):
                raise ProblemConfigError(f"{name} entries must be finite and >= 0")
            object.__setattr__(self, name, _as_matrix(arr, arr.shape, name))

    @property
    def A_array(self) -> np.ndarray:
        return np.asarray(self.A, dtype=float)

    @property
    def q_array(self) -> np.ndarray:
        return np.asarray(self.q_integrals, dtype=float)


@dataclass(frozen=True, eq=False)
class FbsdeProblem:
    """A coupled Markovian FBSDE on [0, horizon] with declared constants."""
    dims: Dimensions
    horizon: float
    x0: np.ndarray
    b: DriftFn
    sigma: VolFn
    g: GeneratorFn
    h: TerminalFn
    constants: AssumptionConstants
    g_shape: str = "general"
    name: str = "custom"
    source: Dict[str, Any] = field(default_factory=dict)   # builtin name/params or config mapping

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ProblemConfigError(f"horizon must be finite and > 0, got {self.horizon}")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dims.m,):
            raise ProblemConfigError(f"x0 must have length m={self.dims.m}, got {x0.shape[0]}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.g_shape not in G_SHAPES:
            raise ProblemConfigError(f"g_shape must be one of {G_SHAPES}, got '{self.g_shape}'")
        self._check_sigma_signature()
        self._check_shapes()

    def _check_sigma_signature(self):
        try:
            params = inspect.signature(self.sigma).parameters.values()
        except (TypeError, ValueError):
            return
        required = [
            p for p in params
            if p.default is inspect.Parameter.empty
            and p.kind in (inspect.Parameter.POSITIONAL_ONLY, inspect.Parameter.POSITIONAL_OR_KEYWORD)
        ]
        if len(required) != 1:
            raise ProblemConfigError(
                "sigma must be a function of time only (one required argument); "
                "state-dependent volatility is not supported"
            )

    def _check_shapes(self):
        m, l, d = self.dims.m, self.dims.l, self.dims.d
        x = np.zeros((1, m))
        y = np.zeros((1, l))
        z = np.zeros((1, l, d))
        checks = {
            "b": (lambda: self.b(0.0, x, y), (1, m)),
            "sigma": (lambda: self.sigma(0.0), (m, d)),
            "g": (lambda: self.g(0.0, x, y, z), (1, l)),
            "h": (lambda: self.h(x), (1, l)),
        }
        for name, (evaluate, shape) in checks.items():
            try:
                value = np.asarray(evaluate(), dtype=float)
            except Exception as e:
                raise ProblemConfigError(f"coefficient {name} failed to evaluate: {e}") from e
            if value.shape != shape:
                raise ProblemConfigError(f"coefficient {name} returned shape {value.shape}, expected {shape}")

    def sigma_at(self, t: float) -> np.ndarray:
        return np.asarray(self.sigma(t), dtype=float).reshape(self.dims.m, self.dims.d)

    def describe(self) -> str:
        return (
            f"{self.name} (m={self.dims.m}, l={self.dims.l}, d={self.dims.d}, "
            f"T={self.horizon}, g_shape={self.g_shape})"
        )


# ---------------------------------------------------------------------------
# Problem configs
# ---------------------------------------------------------------------------

_EXPRESSION_NAMESPACE = {
    "np": np,
    "pi": math.pi,
    "e": math.e,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "where": np.where,
    "norm": np.linalg.norm,
}


def _compile_expression(expr: str, name: str, params: Dict[str, float]):
    try:
        code = compile(str(expr), f"<{name}>", "eval")
    except SyntaxError as e:
        raise ProblemConfigError(f"invalid expression for {name}: {e}") from e
    scope = dict(_EXPRESSION_NAMESPACE)
    scope.update(params)
    scope["__builtins__"] = {}

    def evaluate(**variables):
        return eval(code, scope, variables)

    return evaluate


def _broadcast(value, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    try:
        return np.broadcast_to(arr, shape).copy()
    except ValueError as e:
        raise ProblemConfigError(f"expression for {name} gave shape {arr.shape}, cannot broadcast to {shape}") from e


def _expression_problem(config: Dict[str, Any]) -> FbsdeProblem:
    dims_cfg = config.get("dims", {})
    dims = Dimensions(int(dims_cfg.get("m", 1)), int(dims_cfg.get("l", 1)), int(dims_cfg.get("d", 1)))
    params = {k: float(v) for k, v in (config.get("params") or {}).items()}
    exprs = config.get("coefficients") or {}
    missing = [name for name in ("b", "sigma", "g", "h") if name not in exprs]
    if missing:
        raise ProblemConfigError(f"problem config is missing coefficient expressions: {missing}")

    m, l, d = dims.m, dims.l, dims.d
    b_expr = _compile_expression(exprs["b"], "b", params)
    s_expr = _compile_expression(exprs["sigma"], "sigma", params)
    g_expr = _compile_expression(exprs["g"], "g", params)
    h_expr = _compile_expression(exprs["h"], "h", params)

    def b(t, x, y):
        return _broadcast(b_expr(t=t, x=x, y=y), (x.shape[0], m), "b")

    def sigma(t):
        return _broadcast(s_expr(t=t), (m, d), "sigma")

    def g(t, x, y, z):
        return _broadcast(g_expr(t=t, x=x, y=y, z=z), (x.shape[0], l), "g")

    def h(x):
        return _broadcast(h_expr(x=x), (x.shape[0], l), "h")

    constants = constants_from_mapping(config.get("constants") or {}, dims)
    return FbsdeProblem(
        dims=dims,
        horizon=float(config["horizon"]),
        x0=np.asarray(config.get("x0", [0.0] * m), dtype=float),
        b=b,
        sigma=sigma,
        g=g,
        h=h,
        constants=constants,
        g_shape=config.get("g_shape", "general"),
        name=config.get("name", "expression"),
        source={"config": dict(config)},
    )


def constants_from_mapping(mapping: Dict[str, Any], dims: Dimensions) -> AssumptionConstants:
    """Build AssumptionConstants from a plain mapping (config files, manifests)."""
    values = dict(mapping)
    rho = values.pop("rho", None)
    if isinstance(rho, dict):
        values["rho"] = GrowthFn(**rho)
    elif rho is not None:
        values["rho"] = GrowthFn("constant", float(rho))
    shape = (dims.l, dims.d)
    values["A"] = _as_matrix(values.pop("A", 0.0), shape, "A")
    values["q_integrals"] = _as_matrix(values.pop("q_integrals", 0.0), shape, "q_integrals")
    unknown = set(values) - set(AssumptionConstants.__dataclass_fields__)
    if unknown:
        raise ProblemConfigError(f"unknown constants: {sorted(unknown)}")
    return AssumptionConstants(**values)


def load_problem_config(config: Union[str, Path, Dict[str, Any]]) -> FbsdeProblem:
    """
    Build a problem from a config mapping or a YAML/JSON file.

    Either `builtin` + `params`, or `dims`, `horizon`, `x0`, `coefficients`
    (expression strings over t, x, y, z and numpy) and `constants`.
    """
    if not isinstance(config, dict):
        path = Path(config)
        try:
            config = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as e:
            raise ProblemConfigError(f"cannot read problem config {path}: {e}") from e
        if not isinstance(config, dict):
            raise ProblemConfigError(f"problem config {path} must be a mapping")

    if "builtin" in config:
        from .builtins import builtin_problem
        return builtin_problem(config["builtin"], config.get("params") or {})

    if "horizon" not in config:
        raise ProblemConfigError("problem config needs either 'builtin' or 'horizon' + 'coefficients'")
    problem = _expression_problem(config)
    logger.info(f"Loaded expression problem {problem.describe()}")
    return problem


def problem_stats(problem: FbsdeProblem) -> Dict[str, Any]:
    """Flat summary used in reports."""
    c = problem.constants
    stats: Dict[str, Any] = {"name": problem.name, "T": problem.horizon, "g_shape": problem.g_shape}
    stats.update({"m": problem.dims.m, "l": problem.dims.l, "d": problem.dims.d})
    stats.update({name: getattr(c, name) for name in AssumptionConstants.SCALARS})
    stats["rho"] = f"{c.rho.kind}(c={c.rho.c}, p={c.rho.p})"
    return stats

