"""Tests for EPV and Monte Carlo summaries."""

import numpy as np
import pandas as pd
import pytest

from ib_bias.errors import DegenerateResponseError, InsufficientReplicatesError
from ib_bias.stats.summary import REPORT_COLUMNS, epv, summarize


def raw_frame(values, estimator="MLE", coordinate="beta_1") -> pd.DataFrame:
    return pd.DataFrame(
        {
            "replicate": range(1, len(values) + 1),
            "estimator": estimator,
            "coordinate": coordinate,
            "value": values,
        }
    )


class TestEpv:
    def test_rarer_outcome(self):
        y = np.array([1] * 30 + [0] * 170)
        assert epv(y, 10) == 3.0
        assert epv(1 - y, 10) == 3.0

    def test_degenerate(self):
        with pytest.raises(DegenerateResponseError):
            epv(np.ones(5), 1)


class TestSummarize:
    def test_plus_minus_one(self):
        summary = summarize(raw_frame([1.0, 3.0]), {"beta_1": 2.0})
        row = summary.iloc[0]
        assert list(summary.columns) == REPORT_COLUMNS
        assert row["mean"] == 2.0
        assert row["bias"] == 0.0
        assert row["rmse"] == 1.0
        assert row["mc_se"] == pytest.approx(1.0)
        assert row["n_fail"] == 0

    def test_matches_direct_computation(self):
        values = np.random.default_rng(3).normal(0.5, 1.0, 50)
        row = summarize(raw_frame(values), {"beta_1": 0.0}).iloc[0]
        assert row["bias"] == pytest.approx(values.mean())
        assert row["rmse"] == pytest.approx(np.sqrt(np.mean(values**2)))
        assert row["mc_se"] == pytest.approx(values.std(ddof=1) / np.sqrt(50))

    def test_failures_are_excluded(self):
        row = summarize(raw_frame([1.0, np.nan, 3.0]), {"beta_1": 2.0}).iloc[0]
        assert row["n_fail"] == 1
        assert row["mean"] == 2.0

    def test_groups_by_estimator_and_coordinate(self):
        raw = pd.concat(
            [raw_frame([0.0, 1.0], "MLE"), raw_frame([2.0, 4.0], "IB-MLE")], ignore_index=True
        )
        summary = summarize(raw, {"beta_1": 0.0})
        assert list(summary["estimator"]) == ["MLE", "IB-MLE"]
        assert list(summary["mean"]) == [0.5, 3.0]

    def test_too_few_replicates(self):
        with pytest.raises(InsufficientReplicatesError):
            summarize(raw_frame([1.0, np.nan]), {"beta_1": 0.0})
        row = summarize(raw_frame([1.0, np.nan]), {"beta_1": 0.0}, strict=False).iloc[0]
        assert np.isnan(row["bias"])
        assert row["n_fail"] == 1

    def test_empty(self):
        summary = summarize(pd.DataFrame(columns=["replicate", "estimator", "coordinate", "value"]), {})
        assert summary.empty
        assert list(summary.columns) == REPORT_COLUMNS
