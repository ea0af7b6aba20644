"""
Exception hierarchy for SuperFBSDE.
Solver non-convergence is reported in SolveReport, not raised.
"""

from typing import Optional


class FbsdeError(Exception):
    """Base class for all solver errors."""


class ProblemConfigError(FbsdeError, ValueError):
    """Malformed problem definition, unknown builtin or inadmissible parameter."""


class ManifestError(FbsdeError):
    """Experiment manifest failed schema validation."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        location = ""
        if field is not None:
            location += f" [field: {field}]"
        if line is not None:
            location += f" [line {line}]"
        super().__init__(f"{message}{location}")


class CertificateError(FbsdeError):
    """Requested horizon is longer than the certified local horizon."""


class RegressionError(FbsdeError):
    """Least-squares regression is singular or under-sampled."""


class NonFiniteStateError(FbsdeError):
    """A simulated or regressed quantity became NaN or infinite."""

    def __init__(self, message: str, path: Optional[int] = None, step: Optional[int] = None):
        self.path = path
        self.step = step
        super().__init__(message)


class PdeStabilityError(FbsdeError):
    """Finite-difference PDE solution blew up."""


class GlobalConditionError(FbsdeError):
    """Preconditions of the global pasting solver are not met."""
