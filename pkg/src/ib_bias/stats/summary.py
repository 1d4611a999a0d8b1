"""Events per variable and Monte Carlo bias/RMSE summaries."""

from typing import Mapping

import numpy as np
import pandas as pd

from ib_bias.errors import DegenerateResponseError, InsufficientReplicatesError

RAW_COLUMNS = ["replicate", "estimator", "coordinate", "value"]
REPORT_COLUMNS = [
    "estimator",
    "coordinate",
    "truth",
    "mean",
    "bias",
    "rmse",
    "mc_se",
    "n_fail",
]


def epv(y: np.ndarray, q: int) -> float:
    """Events per variable: the rarer outcome count divided by q."""
    y = np.asarray(y)
    ones = int(np.sum(y == 1))
    zeros = int(np.sum(y == 0))
    if ones == 0 or zeros == 0:
        raise DegenerateResponseError("EPV needs both outcomes present")
    return min(ones, zeros) / q


def summarize(
    raw: pd.DataFrame, truth: Mapping[str, float], strict: bool = True
) -> pd.DataFrame:
    """Per estimator and coordinate: mean, bias, RMSE and MC standard error.

    ``raw`` has one row per (replicate, estimator, coordinate) with NaN
    values for failed fits, which are counted in ``n_fail`` and left out of
    every other column. With ``strict`` fewer than two usable replicates
    raise; otherwise the row carries NaNs.
    """
    if raw.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)

    rows = []
    for (estimator, coordinate), group in raw.groupby(
        ["estimator", "coordinate"], sort=False
    ):
        values = group["value"].to_numpy(dtype=float)
        usable = values[np.isfinite(values)]
        target = float(truth[coordinate])
        n_fail = int(values.size - usable.size)
        if usable.size < 2:
            if strict:
                raise InsufficientReplicatesError(
                    f"{estimator}/{coordinate}: {usable.size} usable replicates"
                )
            mean = bias = rmse = mc_se = np.nan
        else:
            mean = float(np.mean(usable))
            bias = mean - target
            rmse = float(np.sqrt(np.mean((usable - target) ** 2)))
            mc_se = float(np.std(usable, ddof=1) / np.sqrt(usable.size))
        rows.append(
            {
                "estimator": estimator,
                "coordinate": coordinate,
                "truth": target,
                "mean": mean,
                "bias": bias,
                "rmse": rmse,
                "mc_se": mc_se,
                "n_fail": n_fail,
            }
        )
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
