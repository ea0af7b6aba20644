"""
CSV reporting utilities
Atomic, lossless (17 significant digits) CSV emission for reports and tables.
"""

import csv
import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Union

import pandas as pd

if TYPE_CHECKING:
    from ..services.picard import SolveReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
CONVERGENCE_COLUMNS = ["run_id", "n", "delta_n", "ratio", "zmax", "truncation_rate"]

PathLike = Union[str, os.PathLike]


def write_csv_atomic(frame: pd.DataFrame, path: PathLike) -> Path:
    """
    Write `frame` to `path` via a temporary file and an atomic rename.

    Args:
        frame: table to write (index is dropped)
        path: destination; parent directories are created

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        frame.to_csv(tmp_path, index=False, float_format=FLOAT_FORMAT,
                     quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        os.replace(tmp_path, path)
    except Exception:
        if tmp_path.exists():
            tmp_path.unlink()
        raise
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def convergence_frame(reports: Iterable["SolveReport"]) -> pd.DataFrame:
    """One row per (run, Picard iteration)."""
    rows = []
    for index, report in enumerate(reports):
        run_id = report.run_id or f"run-{index}"
        for record in report.history:
            rows.append({
                "run_id": run_id,
                "n": record.n,
                "delta_n": record.delta,
                "ratio": record.ratio,
                "zmax": record.z_max,
                "truncation_rate": record.truncation_rate,
            })
    return pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS)


def emit_convergence_table(reports: Iterable["SolveReport"], path: PathLike) -> Path:
    """
    Write the per-iteration convergence history of one or more solves.

    Raises:
        ValueError: when there are no reports or no iterations to write
    """
    reports = list(reports)
    if not reports:
        raise ValueError("emit_convergence_table needs at least one report")
    frame = convergence_frame(reports)
    if frame.empty:
        raise ValueError("reports contain no Picard iterations")
    return write_csv_atomic(frame, path)


def read_csv(path: PathLike) -> pd.DataFrame:
    """Read back a CSV written by this module."""
    return pd.read_csv(path, float_precision="round_trip")
