"""Export functionality for Monte Carlo reports and datasets."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from ib_bias import FORMAT_VERSION, __version__
from ib_bias.models import Dataset, GlmmDesign
from ib_bias.service.study import MCReport
from ib_bias.stats.inference import ConfidenceInterval
from ib_bias.stats.summary import REPORT_COLUMNS

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
INTERVAL_COLUMNS = ["coordinate", "estimate", "se", "lo", "hi"]


def report_paths(report: MCReport, out_dir: str) -> Dict[str, Path]:
    """Output file names; they embed the setting name and master seed."""
    stem = f"{report.setting.name}_seed{report.master_seed}"
    base = Path(out_dir)
    return {
        "summary": base / f"{stem}_summary.csv",
        "raw": base / f"{stem}_raw.csv",
        "metadata": base / f"{stem}_meta.json",
    }


def versions() -> Dict[str, str]:
    return {
        "ib_bias": __version__,
        "format": FORMAT_VERSION,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def export_summary_csv(report: MCReport, filepath: str) -> None:
    """Export the per-estimator, per-coordinate summary to CSV."""

    # Create directory if it doesn't exist
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)

    summary = report.summary.reindex(columns=REPORT_COLUMNS)
    summary.to_csv(filepath, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def export_raw_csv(report: MCReport, filepath: str) -> None:
    """Export per-replicate estimates; failed fits are empty cells."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    report.raw.to_csv(filepath, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def export_metadata_json(
    report: MCReport, filepath: str, extra: Optional[Dict[str, Any]] = None
) -> None:
    """Export setting echo, seed, versions and timing to JSON."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)

    data = report.metadata()
    data["versions"] = versions()
    if extra:
        data.update(extra)

    with open(filepath, "w", encoding="utf-8") as jsonfile:
        json.dump(data, jsonfile, indent=2, ensure_ascii=False)


def export_report(
    report: MCReport, out_dir: str, extra: Optional[Dict[str, Any]] = None
) -> List[Path]:
    """Write summary CSV, raw CSV and metadata JSON; returns the paths."""
    paths = report_paths(report, out_dir)
    export_summary_csv(report, str(paths["summary"]))
    export_raw_csv(report, str(paths["raw"]))
    export_metadata_json(report, str(paths["metadata"]), extra)
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return list(paths.values())


def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    design = dataset.design
    X = np.asarray(design.X, dtype=float)
    frame = pd.DataFrame({"y": np.asarray(dataset.y, dtype=float)})
    for j in range(X.shape[1]):
        frame[f"x_{j + 1}"] = X[:, j]
    if isinstance(design, GlmmDesign):
        frame["cluster"] = design.cluster
    return frame


def write_dataset_csv(dataset: Dataset, filepath: str) -> None:
    """Dump a dataset in the fit/ib input schema (y, x_1..x_q, cluster)."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset).to_csv(
        filepath, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )


def intervals_frame(intervals: Sequence[ConfidenceInterval]) -> pd.DataFrame:
    rows = [
        {column: getattr(ci, column) for column in INTERVAL_COLUMNS} for ci in intervals
    ]
    return pd.DataFrame(rows, columns=INTERVAL_COLUMNS)


def intervals_csv(intervals: Sequence[ConfidenceInterval]) -> str:
    return intervals_frame(intervals).to_csv(
        index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )


def export_intervals_csv(intervals: Sequence[ConfidenceInterval], filepath: str) -> None:
    """Export confidence intervals as coordinate, estimate, se, lo, hi rows."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as csvfile:
        csvfile.write(intervals_csv(intervals))
