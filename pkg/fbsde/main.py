#!/usr/bin/env python3
"""
SuperFBSDE command line
Subcommands bounds / solve-local / solve-global / solve-bsde / oracle / experiment; each builds an
experiment manifest and runs it through the pipeline.
Exit codes: 0 ok, 1 usage or configuration error, 2 non-convergence, 3 oracle tolerance missed.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .config import configure_logging, get_settings
from .exceptions import FbsdeError, ManifestError
from .models.manifest import ExperimentManifest, load_manifest
from .services.pipeline import EXIT_CONFIG, ExperimentPipeline, PipelineResult
from .utils.reporting import write_csv_atomic

logger = logging.getLogger(__name__)

# Artifact written by --csv for each subcommand
PRIMARY_ARTIFACT = {
    "bounds": "bounds",
    "solve-local": "report",
    "solve-global": "report",
    "solve-bsde": "report",
    "oracle": "oracle",
}


def _parse_params(items: List[str]) -> Dict[str, Any]:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ManifestError(f"--param expects key=value, got '{item}'", field="param")
        params[key.strip()] = yaml.safe_load(value)
    return params


def _problem_mapping(args: argparse.Namespace) -> Dict[str, Any]:
    if args.problem_config:
        try:
            data = yaml.safe_load(Path(args.problem_config).read_text())
        except yaml.YAMLError as e:
            raise ManifestError(f"cannot parse problem config {args.problem_config}: {e}") from e
        if not isinstance(data, dict):
            raise ManifestError(f"problem config {args.problem_config} must be a mapping")
        return data
    if not args.problem:
        raise ManifestError("pass --problem NAME or --problem-config FILE", field="problem")
    return {"builtin": args.problem, "params": _parse_params(args.param)}


def _manifest_from_args(args: argparse.Namespace) -> ExperimentManifest:
    numerics: Dict[str, Any] = {"seed": args.seed}
    for name in ("K", "n_paths", "tol", "max_iters", "c1", "horizon_override", "design_spread",
                 "pasting_step", "schedule_cap", "ridge", "inner_iters"):
        value = getattr(args, name, None)
        if value is not None:
            numerics[name] = value
    if getattr(args, "basis", None):
        numerics["basis"] = {"kind": args.basis, "degree": args.degree, "bins": args.bins}
    if getattr(args, "truncation", None):
        numerics["truncation"] = {"mode": args.truncation, "radius": args.radius}
    if getattr(args, "no_enforce", False):
        numerics["enforce_certificate"] = False
    if getattr(args, "allow_uncovered", False):
        numerics["require_global_conditions"] = False
    if getattr(args, "nodes", None) or getattr(args, "t_steps", None):
        numerics["pde"] = {k: v for k, v in (("nodes", args.nodes), ("t_steps", args.t_steps)) if v is not None}

    outputs: Dict[str, Any] = {"directory": str(args.out_dir or get_settings().output_dir)}
    if args.command == "bounds":
        outputs["csv"] = ["bounds", "schedule"] if args.out_dir else []
    elif args.command == "oracle":
        outputs["csv"] = ["oracle"] if args.out_dir else []
    elif args.command == "solve-bsde":
        outputs["csv"] = ["report", "bounds", "schedule", "diagnostics"]
    else:
        outputs["csv"] = ["report", "convergence", "bounds", "diagnostics"]
        if args.command == "solve-global":
            outputs["csv"] += ["field", "field_table"]
    if args.command.startswith("solve-"):
        if args.trajectories:
            outputs["trajectory_paths"] = args.trajectories

    data: Dict[str, Any] = {
        "name": args.command,
        "pipeline": args.command,
        "problem": _problem_mapping(args),
        "numerics": numerics,
        "outputs": outputs,
    }
    if args.command == "oracle" and args.kind:
        data["expected"] = {"oracle": args.kind}
    return ExperimentManifest.model_validate(data)


def _print_summary(command: str, result: PipelineResult):
    if command == "bounds" and result.bounds is not None:
        print(result.bounds.format_text())
    elif result.report is not None:
        print(result.report.format_text())
    elif "oracle" in result.frames:
        print(result.frames["oracle"].to_string(index=False, max_rows=25))
    if result.reference is not None and command == "oracle":
        print(f"Y0 (oracle) = {result.reference:.12g}")
    if result.message:
        print(result.message, file=sys.stderr)


def run_manifest(path, out_dir: Optional[Path] = None) -> int:
    """
    Run a manifest file; returns the process exit code.

    Args:
        path: manifest YAML path
        out_dir: overrides outputs.directory

    Returns:
        0 ok, 1 configuration error, 2 non-convergence, 3 oracle-tolerance failure
    """
    try:
        manifest = load_manifest(path)
        result = ExperimentPipeline(manifest, out_dir).run()
    except FbsdeError as e:
        logger.error(f"Manifest {path} failed: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Manifest {path} failed unexpectedly: {e}", exc_info=True)
        return EXIT_CONFIG
    _print_summary(manifest.pipeline, result)
    return result.exit_code


def _add_problem_args(parser: argparse.ArgumentParser):
    parser.add_argument("--problem", help="built-in problem name")
    parser.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                        help="built-in parameter (repeatable)")
    parser.add_argument("--problem-config", type=Path, help="YAML/JSON problem config")
    parser.add_argument("--seed", type=int, default=0, help="Brownian seed (default: 0)")
    parser.add_argument("--c1", type=float, help="BDG constant (default: FBSDE_BDG_CONSTANT or 4)")
    parser.add_argument("--csv", type=Path, help="write the primary table to this CSV file")
    parser.add_argument("--out-dir", type=Path, help="directory for all CSV artifacts")


def _add_sweep_args(parser: argparse.ArgumentParser):
    parser.add_argument("--K", type=int, help="time steps (per interval for solve-global)")
    parser.add_argument("--paths", dest="n_paths", type=int, help="Monte Carlo paths")
    parser.add_argument("--basis", choices=["polynomial", "partition"], help="regression basis")
    parser.add_argument("--degree", type=int, default=2, help="polynomial degree (default: 2)")
    parser.add_argument("--bins", type=int, default=8, help="partition cells per axis (default: 8)")
    parser.add_argument("--truncation", choices=["radial", "smooth", "off"], help="generator clamp")
    parser.add_argument("--radius", type=float, help="clamp radius (default: M, or M̄ when pasting)")
    parser.add_argument("--ridge", type=float, help="ridge regularization (default: 1e-8 * paths)")
    parser.add_argument("--inner-iters", type=int, help="semi-implicit substitutions per step")
    parser.add_argument("--no-enforce", action="store_true",
                        help="run past the certified horizon and flag the result not theorem-covered")
    parser.add_argument("--trajectories", type=int, default=0, help="dump this many path trajectories")


def _add_solver_args(parser: argparse.ArgumentParser):
    _add_sweep_args(parser)
    parser.add_argument("--tol", type=float, help="Picard tolerance on the successive difference")
    parser.add_argument("--max-iters", type=int, help="Picard iteration cap")
    parser.add_argument("--horizon-override", type=float, help="user-certified horizon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsde",
        description="Constants, Picard/pasting solvers and oracles for superquadratic coupled FBSDEs.",
    )
    parser.add_argument("--threads", type=int, help="worker threads (default: FBSDE_NUM_THREADS or physical cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    bounds = sub.add_parser("bounds", help="closed-form constants, schedule and pasting grid")
    _add_problem_args(bounds)
    bounds.add_argument("--schedule-cap", type=int, help="Δₙ terms to try (default: 10^6)")

    local = sub.add_parser("solve-local", help="Picard iteration on [0, T]")
    _add_problem_args(local)
    _add_solver_args(local)

    glob = sub.add_parser("solve-global", help="pasted solve along the decoupling field")
    _add_problem_args(glob)
    _add_solver_args(glob)
    glob.add_argument("--design-spread", type=float, help="std of the interval design (default: 3 λ2 sqrt(T))")
    glob.add_argument("--pasting-step", type=float, help="pasting step (default: C̄)")
    glob.add_argument("--allow-uncovered", action="store_true",
                      help="run even if the global conditions fail (result flagged not theorem-covered)")

    bsde = sub.add_parser("solve-bsde", help="pure BSDE swept over the Δₙ schedule")
    _add_problem_args(bsde)
    _add_sweep_args(bsde)
    bsde.add_argument("--schedule-cap", type=int, help="Δₙ terms to try (default: 10^6)")

    oracle = sub.add_parser("oracle", help="tabulate a closed-form or PDE reference solution")
    _add_problem_args(oracle)
    oracle.add_argument("--kind", choices=["closed_form", "pde"], help="oracle (default: closed form if known)")
    oracle.add_argument("--nodes", type=int, help="PDE space nodes (default: 401)")
    oracle.add_argument("--t-steps", type=int, help="PDE time steps (default: 400)")

    experiment = sub.add_parser("experiment", help="run an experiment manifest")
    experiment.add_argument("manifest", type=Path)
    experiment.add_argument("--out-dir", type=Path, help="override outputs.directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0

    if args.threads:
        os.environ["FBSDE_NUM_THREADS"] = str(args.threads)
        get_settings.cache_clear()
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else None
    try:
        configure_logging(level)
    except ValueError as e:
        print(f"invalid settings: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "experiment":
        return run_manifest(args.manifest, args.out_dir)

    try:
        manifest = _manifest_from_args(args)
        result = ExperimentPipeline(manifest, args.out_dir).run()
        if args.csv is not None:
            frame = result.frames.get(PRIMARY_ARTIFACT[args.command])
            if frame is not None:
                write_csv_atomic(frame, args.csv)
    except (FbsdeError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CONFIG
    _print_summary(args.command, result)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
