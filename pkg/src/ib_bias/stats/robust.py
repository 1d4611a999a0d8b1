"""Huber-type robust M-estimator for logistic regression."""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from ib_bias.config import EstimatorSpec
from ib_bias.errors import InvalidParameterError
from ib_bias.models import EstimatorKind, FitResult, LogisticDesign, check_full_rank
from ib_bias.stats.logistic import check_response, newton_solve

logger = logging.getLogger(__name__)

# mu (1 - mu) underflows to 0 once |eta| passes about 37.
VARIANCE_FLOOR = np.finfo(float).tiny


def huber_psi(r: np.ndarray, c: float) -> np.ndarray:
    """Huber psi: r inside [-c, c], c * sign(r) outside."""
    if not c > 0:
        raise InvalidParameterError(f"huber_c must be positive, got {c}")
    return np.clip(r, -c, c)


def huber_psi_derivative(r: np.ndarray, c: float) -> np.ndarray:
    return (np.abs(r) <= c).astype(float)


def leverage_weights(design: LogisticDesign) -> np.ndarray:
    """sqrt(1 - h_ii) from the hat matrix X (X'X)^{-1} X'."""
    check_full_rank(design.X)
    Q, _ = np.linalg.qr(design.X, mode="reduced")
    hat = np.einsum("ij,ij->i", Q, Q)
    return np.sqrt(np.maximum(1.0 - hat, 0.0))


def expected_psi(
    mu: np.ndarray, s: np.ndarray, delta: float, c: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """E[psi(r)] under the two-point law {1-delta w.p. mu, delta w.p. 1-mu}.

    Returns the expectation and the two standardized support points.
    """
    a1 = (1.0 - delta - mu) / s
    a0 = (delta - mu) / s
    return mu * huber_psi(a1, c) + (1.0 - mu) * huber_psi(a0, c), a1, a0


def robust_m_estimator(
    design: LogisticDesign, y: np.ndarray, spec: Optional[EstimatorSpec] = None
) -> FitResult:
    """Root of (1/n) sum_i [psi_c(r_i) - E psi_c(r_i)] w_i sqrt(V_i) x_i.

    ``r_i`` is the Pearson residual and the consistency correction is exact
    for the two-point response law implied by ``spec.delta``.
    """
    spec = spec or EstimatorSpec(kind=EstimatorKind.LOGISTIC_ROBUST)
    c = spec.huber_c
    if not c > 0:
        raise InvalidParameterError(f"huber_c must be positive, got {c}")
    delta = spec.delta
    y = check_response(design, y)
    X = design.X
    n = design.n
    if spec.x_weights == "leverage":
        w = leverage_weights(design)
    else:
        w = np.ones(n)

    def terms(beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-observation t_i and dt_i/d eta_i."""
        mu = expit(X @ beta)
        v = np.maximum(mu * (1.0 - mu), VARIANCE_FLOOR)
        s = np.sqrt(v)
        half_slope = 0.5 * (1.0 - 2.0 * mu)
        r = (y - mu) / s
        e_psi, a1, a0 = expected_psi(mu, s, delta, c)
        psi_r = huber_psi(r, c)

        d_psi = huber_psi_derivative(r, c) * (-s - r * half_slope)
        d_e_psi = (
            v * (huber_psi(a1, c) - huber_psi(a0, c))
            + mu * huber_psi_derivative(a1, c) * (-s - a1 * half_slope)
            + (1.0 - mu) * huber_psi_derivative(a0, c) * (-s - a0 * half_slope)
        )
        core = psi_r - e_psi
        t = core * w * s
        dt = (d_psi - d_e_psi) * w * s + core * w * s * half_slope
        return t, dt

    def evaluate(beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        t, dt = terms(beta)
        g = X.T @ t / n
        jac = (X * dt[:, np.newaxis]).T @ X / n
        step = -np.linalg.lstsq(jac, g, rcond=None)[0]
        return g, step

    def merit(beta: np.ndarray) -> float:
        t, _ = terms(beta)
        g = X.T @ t / n
        value = -float(g @ g)
        return value if np.isfinite(value) else -np.inf

    beta, converged, iterations, grad_norm, flags = newton_solve(
        np.zeros(design.q), evaluate, merit, spec.irls
    )
    if not converged:
        logger.debug(
            "robust_m_estimator stopped after %d iterations %s", iterations, flags
        )
    return FitResult(
        kind=EstimatorKind.LOGISTIC_ROBUST.value,
        theta_hat=beta,
        converged=converged,
        iterations=iterations,
        final_grad_norm=grad_norm,
        flags=flags,
    )
