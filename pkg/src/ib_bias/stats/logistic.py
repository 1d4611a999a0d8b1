"""Logistic regression estimators: IRLS MLE, pseudo-values and Firth."""

import logging
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import expit

from ib_bias.config import EstimatorSpec, IrlsControl
from ib_bias.errors import DimensionMismatchError, InvalidParameterError
from ib_bias.models import EstimatorKind, FitResult, LogisticDesign

logger = logging.getLogger(__name__)

# Newton steps are rescaled so that no coordinate moves further than this.
MAX_STEP = 5.0
# |eta| beyond this at exit means fitted probabilities are numerically 0 or 1.
SEPARATION_ETA = 30.0


def pseudo_values(y: np.ndarray, delta: float) -> np.ndarray:
    """Shift binary responses to (1 - delta) y + delta (1 - y)."""
    if not 0.0 <= delta < 0.5:
        raise InvalidParameterError(f"delta must lie in [0, 0.5), got {delta}")
    y = np.asarray(y, dtype=float)
    return (1.0 - delta) * y + delta * (1.0 - y)


def check_response(design: LogisticDesign, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (design.n,):
        raise DimensionMismatchError(
            f"y has shape {y.shape}, design has {design.n} rows"
        )
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise InvalidParameterError("responses must lie in [0, 1]")
    return y


def log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    """Bernoulli log-likelihood, valid for fractional y."""
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def weighted_design(X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """W^{1/2} X with W = diag(mu (1 - mu))."""
    return np.sqrt(mu * (1.0 - mu))[:, np.newaxis] * X


def hat_diagonal(XW: np.ndarray) -> np.ndarray:
    """Diagonal of the hat matrix of XW from its reduced QR."""
    Q, _ = np.linalg.qr(XW, mode="reduced")
    return np.einsum("ij,ij->i", Q, Q)


def newton_solve(
    theta0: np.ndarray,
    evaluate: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    merit: Callable[[np.ndarray], float],
    control: IrlsControl,
    step_tol: Optional[float] = None,
) -> Tuple[np.ndarray, bool, int, float, Tuple[str, ...]]:
    """Damped Newton iteration with step capping and step-halving.

    ``evaluate(theta)`` returns the scaled estimating function and the full
    Newton step; ``merit`` is maximized by the line search. Converged means
    the estimating function sup-norm is at most ``control.tol`` and the
    Newton step has stopped moving.

    Returns (theta, converged, iterations, grad_norm, flags).
    """
    theta = np.array(theta0, dtype=float)
    step_tol = np.sqrt(control.tol) if step_tol is None else step_tol
    flags: Tuple[str, ...] = ()
    grad_norm = np.inf
    iterations = 0

    for iterations in range(1, control.max_iter + 1):
        try:
            grad, step = evaluate(theta)
        except np.linalg.LinAlgError:
            flags += ("singular_information",)
            grad_norm = np.inf
            break
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if not np.all(np.isfinite(step)):
            flags += ("non_finite_step",)
            break
        step_size = float(np.max(np.abs(step))) if step.size else 0.0
        if grad_norm <= control.tol and step_size <= step_tol * (
            1.0 + float(np.max(np.abs(theta)))
        ):
            theta = theta + step
            try:
                grad, _ = evaluate(theta)
            except np.linalg.LinAlgError:
                return theta, True, iterations, grad_norm, flags
            final_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
            return theta, True, iterations, final_norm, flags

        if step_size > MAX_STEP:
            step = step * (MAX_STEP / step_size)
        current = merit(theta)
        candidate = theta + step
        halvings = 0
        while not merit(candidate) >= current:
            if halvings == control.max_halvings:
                break
            step = 0.5 * step
            candidate = theta + step
            halvings += 1
        if not merit(candidate) >= current:
            flags += ("line_search",)
            break
        theta = candidate
    else:
        # The last accepted step moved theta past its evaluation.
        try:
            grad, _ = evaluate(theta)
            grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        except np.linalg.LinAlgError:
            flags += ("singular_information",)
            grad_norm = np.inf

    return theta, False, iterations, grad_norm, flags


def logistic_irls(
    design: LogisticDesign, y: np.ndarray, spec: Optional[EstimatorSpec] = None
) -> FitResult:
    """Logistic MLE, the root of (1/n) X'(y - mu(beta)), from beta = 0.

    Accepts pseudo-valued responses, whose root always exists. Separated
    binary data never converge: the fit stops with ``converged=False`` and
    the ``separation`` flag.
    """
    spec = spec or EstimatorSpec()
    y = check_response(design, y)
    X = design.X
    n = design.n

    def evaluate(beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mu = expit(X @ beta)
        XW = weighted_design(X, mu)
        score = X.T @ (y - mu)
        step = np.linalg.solve(XW.T @ XW, score)
        return score / n, step

    beta, converged, iterations, grad_norm, flags = newton_solve(
        np.zeros(design.q),
        evaluate,
        lambda b: log_likelihood(X, y, b),
        spec.irls,
    )
    binary = bool(np.all((y == 0.0) | (y == 1.0)))
    if binary and float(np.max(np.abs(X @ beta))) > SEPARATION_ETA:
        converged = False
        flags += ("separation",)
    if not converged:
        logger.debug("logistic_irls stopped after %d iterations %s", iterations, flags)
    return FitResult(
        kind=EstimatorKind.LOGISTIC_MLE.value,
        theta_hat=beta,
        converged=converged,
        iterations=iterations,
        final_grad_norm=grad_norm,
        flags=flags,
    )


def firth_penalized_log_likelihood(
    X: np.ndarray, y: np.ndarray, beta: np.ndarray
) -> float:
    mu = expit(X @ beta)
    XW = weighted_design(X, mu)
    sign, logdet = np.linalg.slogdet(XW.T @ XW)
    if sign <= 0:
        return -np.inf
    return log_likelihood(X, y, beta) + 0.5 * logdet


def logistic_firth(
    design: LogisticDesign, y: np.ndarray, spec: Optional[EstimatorSpec] = None
) -> FitResult:
    """Firth bias-reduced logistic fit on the raw responses.

    Solves X'(y - mu + h (1/2 - mu)) = 0 where h is the leverage of the
    weighted design; the estimate stays finite under separation.
    """
    spec = spec or EstimatorSpec(kind=EstimatorKind.LOGISTIC_FIRTH)
    y = check_response(design, y)
    X = design.X
    n = design.n

    def evaluate(beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mu = expit(X @ beta)
        XW = weighted_design(X, mu)
        hat = hat_diagonal(XW)
        u_star = X.T @ (y - mu + hat * (0.5 - mu))
        step = np.linalg.lstsq(XW.T @ XW, u_star, rcond=None)[0]
        return u_star / n, step

    beta, converged, iterations, grad_norm, flags = newton_solve(
        np.zeros(design.q),
        evaluate,
        lambda b: firth_penalized_log_likelihood(X, y, b),
        spec.irls,
    )
    return FitResult(
        kind=EstimatorKind.LOGISTIC_FIRTH.value,
        theta_hat=beta,
        converged=converged,
        iterations=iterations,
        final_grad_norm=grad_norm,
        flags=flags,
    )
