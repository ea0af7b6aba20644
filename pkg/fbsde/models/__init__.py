"""Problem definitions, built-in test problems and experiment manifests."""

from .problem import Dimensions, GrowthFn, AssumptionConstants, FbsdeProblem, load_problem_config
from .builtins import builtin_problem, BUILTIN_PROBLEMS
from .validation import validate_problem, ValidationReport, ValidationRecord
from .manifest import ExperimentManifest, load_manifest, parse_manifest

__all__ = [
    "Dimensions",
    "GrowthFn",
    "AssumptionConstants",
    "FbsdeProblem",
    "load_problem_config",
    "builtin_problem",
    "BUILTIN_PROBLEMS",
    "validate_problem",
    "ValidationReport",
    "ValidationRecord",
    "ExperimentManifest",
    "load_manifest",
    "parse_manifest",
]
