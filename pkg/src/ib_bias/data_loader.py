"""Data loader for CSV datasets (header: y, x_1..x_q, optional cluster)."""

import logging
import re
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from ib_bias.errors import SchemaError
from ib_bias.models import Dataset, GlmmDesign, LogisticDesign

logger = logging.getLogger(__name__)

COVARIATE_PATTERN = re.compile(r"^x_(\d+)$")


class CsvDataLoader:
    """Reads and validates one dataset file."""

    def __init__(self, file_path: str):
        self.file_path = Path(file_path)
        self.data: Optional[pd.DataFrame] = None
        self.cluster_labels: Optional[np.ndarray] = None

    def load_data(self) -> pd.DataFrame:
        """Load the CSV file; raises SchemaError when it cannot be parsed."""
        if not self.file_path.exists():
            raise SchemaError(f"data file {self.file_path} does not exist")
        try:
            self.data = pd.read_csv(self.file_path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise SchemaError(f"cannot parse {self.file_path}: {exc}") from exc
        self.data.columns = [str(col).strip() for col in self.data.columns]
        logger.debug("loaded %d rows, columns %s", len(self.data), list(self.data.columns))
        return self.data

    def covariate_columns(self) -> List[str]:
        """x_1..x_q in index order; raises naming the first missing column."""
        assert self.data is not None
        indices = []
        for col in self.data.columns:
            match = COVARIATE_PATTERN.match(col)
            if match:
                indices.append(int(match.group(1)))
            elif col not in ("y", "cluster"):
                raise SchemaError(f"unexpected column {col!r}")
        if len(indices) != len(set(indices)):
            raise SchemaError("duplicate covariate columns")
        for expected in range(1, len(indices) + 1):
            if expected not in indices:
                raise SchemaError(f"missing column 'x_{expected}'")
        return [f"x_{j}" for j in range(1, len(indices) + 1)]

    def _numeric(self, columns: List[str]) -> np.ndarray:
        assert self.data is not None
        frame = self.data[columns]
        try:
            values = frame.to_numpy(dtype=float)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"non-numeric values in {columns}: {exc}") from exc
        if not np.all(np.isfinite(values)):
            finite = np.all(np.isfinite(values), axis=0)
            bad = [col for col, ok in zip(columns, finite) if not ok]
            raise SchemaError(f"missing or non-finite values in {bad}")
        return values

    def responses(self) -> np.ndarray:
        """The y column alone, for the toy models."""
        if self.data is None:
            self.load_data()
        assert self.data is not None
        if "y" not in self.data.columns:
            raise SchemaError("missing column 'y'")
        return self._numeric(["y"])[:, 0]

    def to_dataset(self, model: str = "logistic", intercept: bool = True) -> Dataset:
        """Build a Dataset for ``model`` ("logistic" or "glmm").

        Logistic designs get a leading column of ones when ``intercept`` is
        set; GLMM designs always carry their intercept implicitly. Cluster
        labels are relabelled 0..m-1 in sorted order and the originals kept
        in ``cluster_labels``.
        """
        if self.data is None:
            self.load_data()
        assert self.data is not None
        if "y" not in self.data.columns:
            raise SchemaError("missing column 'y'")
        columns = self.covariate_columns()
        y = self._numeric(["y"])[:, 0]
        X = self._numeric(columns) if columns else np.empty((len(self.data), 0))

        if model == "glmm":
            if "cluster" not in self.data.columns:
                raise SchemaError("missing column 'cluster'")
            codes, labels = pd.factorize(self.data["cluster"], sort=True)
            if np.any(codes < 0):
                raise SchemaError("missing values in 'cluster'")
            self.cluster_labels = np.asarray(labels)
            return Dataset(design=GlmmDesign(X, codes, m=len(labels)), y=y)

        if intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        if X.shape[1] == 0:
            raise SchemaError("a model without intercept needs at least one 'x_j' column")
        return Dataset(design=LogisticDesign(X), y=y)


def load_csv_dataset(file_path: str, model: str = "logistic", intercept: bool = True) -> Dataset:
    """Load a dataset file for the fit, ib and infer commands."""
    return CsvDataLoader(file_path).to_dataset(model=model, intercept=intercept)

