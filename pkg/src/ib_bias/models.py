"""Domain models: designs, datasets and fit results."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from ib_bias.errors import DimensionMismatchError, RankDeficientError, SchemaError

# Singular values below RANK_RTOL * s_max count as zero.
RANK_RTOL = 1e-10


class EstimatorKind(str, Enum):
    """Initial and comparison estimators."""

    LOGISTIC_MLE = "LogisticMLE"
    LOGISTIC_FIRTH = "LogisticFirth"
    LOGISTIC_ROBUST = "LogisticRobust"
    GLMM_PIRLS = "GlmmPIRLS"
    GLMM_GHQ = "GlmmGHQ"


def column_rank(X: np.ndarray) -> int:
    """Numerical column rank of X using the SVD."""
    if X.size == 0:
        return 0
    s = np.linalg.svd(X, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def check_full_rank(X: np.ndarray) -> None:
    """Raise RankDeficientError unless X has full column rank."""
    rank = column_rank(X)
    if rank < X.shape[1]:
        raise RankDeficientError(
            f"Design has rank {rank} < {X.shape[1]} columns"
        )


@dataclass(frozen=True)
class LogisticDesign:
    """Fixed covariate matrix for the logistic model.

    The first column is all ones when the model has an intercept.
    """

    X: np.ndarray
    check_rank: bool = True

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise SchemaError(f"Design matrix must be 2-D, got shape {X.shape}")
        object.__setattr__(self, "X", X)
        if self.check_rank:
            check_full_rank(X)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def q(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class GlmmDesign:
    """Covariates and cluster labels for the random-intercept logistic model.

    ``X`` holds the q slope covariates only; the intercept is implicit.
    Cluster labels are 0-based, ``0..m-1``.
    """

    X: np.ndarray
    cluster: np.ndarray
    m: Optional[int] = None
    check_rank: bool = True

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise SchemaError(f"Design matrix must be 2-D, got shape {X.shape}")
        cluster = np.asarray(self.cluster)
        if cluster.shape != (X.shape[0],):
            raise DimensionMismatchError(
                f"cluster has shape {cluster.shape}, expected ({X.shape[0]},)"
            )
        if not np.issubdtype(cluster.dtype, np.integer):
            if not np.all(np.mod(cluster, 1) == 0):
                raise SchemaError("Cluster labels must be integers")
            cluster = cluster.astype(np.int64)
        m = int(cluster.max()) + 1 if self.m is None else int(self.m)
        if cluster.size and (cluster.min() < 0 or cluster.max() >= m):
            raise SchemaError(f"Cluster labels must lie in 0..{m - 1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "cluster", cluster.astype(np.int64))
        object.__setattr__(self, "m", m)
        if self.check_rank:
            check_full_rank(self.fixed_effects_matrix())

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def q(self) -> int:
        return int(self.X.shape[1])

    @property
    def n_i(self) -> np.ndarray:
        """Per-cluster sizes; they sum to n."""
        return np.bincount(self.cluster, minlength=self.m)

    @property
    def dim(self) -> int:
        """Packed parameter length: intercept, q slopes, log variance."""
        return self.q + 2

    def fixed_effects_matrix(self) -> np.ndarray:
        """[1, X] as used by the pooled logistic fit."""
        return np.column_stack([np.ones(self.n), self.X])

    def pooled(self) -> LogisticDesign:
        return LogisticDesign(self.fixed_effects_matrix(), check_rank=False)


@dataclass(frozen=True)
class Dataset:
    """A fixed design with one response vector."""

    design: Any
    y: np.ndarray

    @property
    def n(self) -> int:
        return int(self.y.shape[0])


@dataclass
class FitResult:
    """Result of one estimator fit."""

    kind: str
    theta_hat: np.ndarray
    converged: bool
    iterations: int
    final_grad_norm: float
    flags: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "theta_hat": [float(v) for v in self.theta_hat],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "final_grad_norm": float(self.final_grad_norm),
            "flags": list(self.flags),
        }

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta_hat)))
