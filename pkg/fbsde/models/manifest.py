"""
Experiment manifests
YAML schema (pydantic) for reproducible runs: problem, pipeline, numerics, outputs, expectations.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..exceptions import ManifestError

logger = logging.getLogger(__name__)

ARTIFACTS = ("bounds", "schedule", "report", "convergence", "diagnostics", "trajectories",
             "field", "field_table", "oracle", "validation")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BasisSpec(_Strict):
    kind: Literal["polynomial", "partition"] = "polynomial"
    degree: int = Field(default=2, ge=0)
    bins: int = Field(default=8, ge=1)


class TruncationSpec(_Strict):
    mode: Literal["radial", "smooth", "off"] = "radial"
    radius: Optional[float] = Field(default=None, gt=0)


class PdeSpec(_Strict):
    nodes: int = Field(default=401, ge=5)
    t_steps: int = Field(default=400, ge=1)
    lower: Optional[float] = None
    upper: Optional[float] = None
    padding: float = Field(default=6.0, gt=0)
    field_sweeps: int = Field(default=20, ge=1)
    field_tol: float = Field(default=1e-10, gt=0)


class NumericsSpec(_Strict):
    seed: int = Field(ge=0)                     # required: no wall-clock seeding
    K: int = Field(default=50, ge=1)
    n_paths: int = Field(default=10_000, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    max_iters: int = Field(default=50, ge=1)
    basis: BasisSpec = Field(default_factory=BasisSpec)
    truncation: TruncationSpec = Field(default_factory=TruncationSpec)
    inner_iters: int = Field(default=2, ge=0)
    ridge: Optional[float] = Field(default=None, ge=0)
    design_spread: Optional[float] = Field(default=None, gt=0)
    pasting_step: Optional[float] = Field(default=None, gt=0)
    c1: Optional[float] = Field(default=None, gt=0)
    horizon_override: Optional[float] = Field(default=None, gt=0)
    enforce_certificate: bool = True
    require_global_conditions: bool = True
    schedule_cap: Optional[int] = Field(default=None, ge=1)
    pde: PdeSpec = Field(default_factory=PdeSpec)


class OutputsSpec(_Strict):
    directory: str = "results"
    csv: List[str] = Field(default_factory=lambda: ["report", "convergence", "bounds"])
    trajectory_paths: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _known_artifacts(self):
        unknown = [name for name in self.csv if name not in ARTIFACTS]
        if unknown:
            raise ValueError(f"unknown artifacts {unknown}; expected a subset of {list(ARTIFACTS)}")
        return self


class ExpectedSpec(_Strict):
    """Optional acceptance gate: compare Y0 with an oracle or a literal value."""
    oracle: Optional[Literal["closed_form", "pde"]] = None
    value: Optional[float] = None
    tolerance: float = Field(default=1e-2, gt=0)
    relative: bool = True
    converged: bool = True

    @model_validator(mode="after")
    def _one_reference(self):
        if self.oracle is not None and self.value is not None:
            raise ValueError("give either an oracle or a value, not both")
        return self


class ExperimentManifest(_Strict):
    name: str = "experiment"
    pipeline: Literal["bounds", "solve-local", "solve-global", "solve-bsde", "oracle"] = "solve-local"
    problem: Dict[str, Any]
    numerics: NumericsSpec
    outputs: OutputsSpec = Field(default_factory=OutputsSpec)
    expected: Optional[ExpectedSpec] = None

    @model_validator(mode="after")
    def _problem_shape(self):
        if "builtin" not in self.problem and "horizon" not in self.problem:
            raise ValueError("problem needs either 'builtin' (+ 'params') or an inline definition with 'horizon'")
        return self

    def dump(self) -> str:
        """Serialize to YAML; parsing the result gives an equal manifest."""
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _line_of(node: Optional[yaml.Node], loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the deepest YAML node along a pydantic error location."""
    if node is None:
        return None
    line = node.start_mark.line + 1
    for key in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == key:
                    child = value_node
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
        if child is None:
            break
        node = child
        line = node.start_mark.line + 1
    return line


def parse_manifest(text: str, source: str = "<manifest>") -> ExperimentManifest:
    """
    Parse and validate manifest YAML.

    Raises:
        ManifestError: with the offending field and line
    """
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ManifestError(f"{source}: invalid YAML: {e}",
                            line=mark.line + 1 if mark is not None else None) from e
    if not isinstance(data, dict):
        raise ManifestError(f"{source}: manifest must be a mapping")
    try:
        return ExperimentManifest.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = [part for part in first["loc"]]
        field = ".".join(str(part) for part in loc) or None
        raise ManifestError(f"{source}: {first['msg']}", field=field, line=_line_of(root, loc)) from e


def load_manifest(path: Union[str, Path]) -> ExperimentManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    manifest = parse_manifest(text, str(path))
    logger.info(f"Loaded manifest {path} ({manifest.pipeline}, seed={manifest.numerics.seed})")
    return manifest
