"""Exception hierarchy for the IB bias-correction engine."""

from typing import Any, Optional


class IBBiasError(Exception):
    """Base class for all errors raised by ib_bias."""


# Contract / argument errors


class DimensionMismatchError(IBBiasError, ValueError):
    """Parameter vector and design dimensions disagree."""


class RankDeficientError(IBBiasError, ValueError):
    """Design matrix does not have full column rank."""


class InvalidParameterError(IBBiasError, ValueError):
    """A scalar parameter is outside its admissible range."""


class NotPositiveDefiniteError(IBBiasError, ValueError):
    """A weighting matrix is not symmetric positive-definite."""


class DegenerateResponseError(IBBiasError, ValueError):
    """Response vector has a single outcome class."""


class SchemaError(IBBiasError, ValueError):
    """A CSV or JSON input does not follow the documented schema."""


# Numerical failures


class NumericalError(IBBiasError):
    """Base class for numerical failures."""


class MaxIterExceeded(NumericalError):
    """The IB sequence did not reach the stopping threshold."""

    def __init__(self, message: str, trace: Optional[Any] = None) -> None:
        super().__init__(message)
        self.trace = trace


class InnerFailureBudgetExceeded(NumericalError):
    """Too many inner fits failed within one IB step."""

    def __init__(self, failures: int, total: int, budget: float) -> None:
        super().__init__(
            f"{failures}/{total} inner fits failed (budget {budget:.0%})"
        )
        self.failures = failures
        self.total = total
        self.budget = budget


class InsufficientPointsError(NumericalError):
    """Not enough usable step norms for a convergence-rate fit."""


class SingularJacobianError(NumericalError):
    """The binding Jacobian is singular or badly conditioned."""


class QuadratureError(NumericalError):
    """Gauss-Hermite quadrature produced non-finite values."""


class CovarianceRepairError(NumericalError):
    """Covariance matrix needed a large PSD repair."""


class InsufficientReplicatesError(NumericalError):
    """Fewer than two successful Monte Carlo replicates."""


class FailureBudgetExceeded(NumericalError):
    """An estimator failed on too many Monte Carlo replicates."""
