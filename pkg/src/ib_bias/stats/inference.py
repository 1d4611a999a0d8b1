"""Variance estimation and confidence intervals for IB estimates."""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from ib_bias.config import IBConfig, InferenceConfig
from ib_bias.errors import (
    CovarianceRepairError,
    InvalidParameterError,
    SingularJacobianError,
)
from ib_bias.ib.binding import ProblemBinding
from ib_bias.ib.engine import (
    IBTrace,
    StepEvaluation,
    collect_estimates,
    check_failure_budget,
    simulated_estimates,
)

logger = logging.getLogger(__name__)

DEFAULT_JACOBIAN_STEP = 1e-3
MAX_CONDITION = 1e12
REPAIR_RTOL = 1e-8


@dataclass
class VarianceEstimate:
    """Sandwich pieces and the assembled covariance of the IB estimate."""

    sigma_pi: np.ndarray
    B_hat: np.ndarray
    var_theta: np.ndarray
    H_used: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma_pi": self.sigma_pi.tolist(),
            "B_hat": self.B_hat.tolist(),
            "var_theta": self.var_theta.tolist(),
            "H_used": int(self.H_used),
        }


@dataclass
class ConfidenceInterval:
    coordinate: str
    estimate: float
    se: float
    lo: float
    hi: float
    flags: Tuple[str, ...] = field(default_factory=tuple)


def _simulate_at(
    theta: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    indices: List[int],
) -> StepEvaluation:
    tasks = [(theta, h) for h in indices]
    results = simulated_estimates(binding, tasks, cfg.seed_set, cfg.n_jobs)
    return collect_estimates(results, binding.dim)


def bootstrap_cov_pi(
    theta_hat: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    inference: Optional[InferenceConfig] = None,
    trace: Optional[IBTrace] = None,
) -> np.ndarray:
    """Parametric-bootstrap covariance of the initial estimator at theta_hat.

    Uses seeds h = 1..H_var of the simulation stream. The first H rows are
    taken from ``trace.final_estimates`` when they were computed at the same
    point with fixed seeds and none failed.
    """
    inference = inference or InferenceConfig()
    theta_hat = np.asarray(theta_hat, dtype=float)
    H_var = inference.resolved_H_var(cfg.H)
    if H_var < 2:
        raise InvalidParameterError("the bootstrap covariance needs H >= 2")

    cached = None
    if (
        inference.reuse_last_fits
        and trace is not None
        and trace.final_estimates is not None
        and cfg.fixed_seeds
        and trace.final_estimates.shape[0] == min(cfg.H, H_var)
        and np.array_equal(trace.theta, theta_hat)
    ):
        cached = trace.final_estimates
    start = 0 if cached is None else cached.shape[0]
    fresh = _simulate_at(theta_hat, binding, cfg, list(range(start + 1, H_var + 1)))
    check_failure_budget(fresh, cfg)
    estimates = fresh.estimates if cached is None else np.vstack([cached, fresh.estimates])
    logger.debug("bootstrap covariance from %d fits (%d cached)", estimates.shape[0], start)
    return np.atleast_2d(np.cov(estimates, rowvar=False, ddof=1))


def _jacobian_steps(theta: np.ndarray, step: Optional[float]) -> np.ndarray:
    relative = DEFAULT_JACOBIAN_STEP if step is None else step
    if not relative > 0:
        raise InvalidParameterError(f"Jacobian step must be positive, got {step}")
    return relative * (1.0 + np.abs(theta))


def numerical_jacobian_B(
    theta_hat: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    step: Optional[float] = None,
) -> np.ndarray:
    """Central-difference Jacobian of theta -> mean_h pi*_h(theta).

    Both sides of every column use the same seeds h = 1..H. Column j moves
    coordinate j by ``step * (1 + |theta_j|)``. Bindings with binary
    responses simulate through their smoothed draws here, since with frozen
    seeds the binary map is piecewise constant.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    binding = binding.for_differences()
    p = binding.dim
    steps = _jacobian_steps(theta_hat, step)
    points = []
    for j in range(p):
        for sign in (1.0, -1.0):
            moved = theta_hat.copy()
            moved[j] += sign * steps[j]
            points.append(moved)

    if cfg.analytic:
        if binding.exact is None:
            raise InvalidParameterError(f"{binding.name} has no exact binding function")
        means = [np.asarray(binding.exact(point), dtype=float) for point in points]
    else:
        tasks = [(point, h) for point in points for h in range(1, cfg.H + 1)]
        results = simulated_estimates(binding, tasks, cfg.seed_set, cfg.n_jobs)
        means = []
        for i in range(len(points)):
            evaluation = collect_estimates(results[i * cfg.H : (i + 1) * cfg.H], p)
            check_failure_budget(evaluation, cfg)
            means.append(evaluation.mean)

    B = np.empty((p, p))
    for j in range(p):
        B[:, j] = (means[2 * j] - means[2 * j + 1]) / (2.0 * steps[j])
    if not np.all(np.isfinite(B)):
        raise SingularJacobianError("numerical Jacobian has non-finite entries")
    return B


def assemble_var_theta(sigma_pi: np.ndarray, B_hat: np.ndarray, H: float) -> np.ndarray:
    """(1 + 1/H) B^{-1} Sigma B^{-T}, symmetrized and PSD-repaired."""
    sigma_pi = np.atleast_2d(np.asarray(sigma_pi, dtype=float))
    B_hat = np.atleast_2d(np.asarray(B_hat, dtype=float))
    condition = np.linalg.cond(B_hat)
    if not np.isfinite(condition) or condition >= MAX_CONDITION:
        raise SingularJacobianError(f"Jacobian condition number {condition:.3g}")
    B_inv = np.linalg.inv(B_hat)
    inflation = 1.0 if math.isinf(H) else 1.0 + 1.0 / H
    var = inflation * (B_inv @ sigma_pi @ B_inv.T)
    var = 0.5 * (var + var.T)

    eigenvalues, vectors = np.linalg.eigh(var)
    if eigenvalues.min() >= 0:
        return var
    repaired = (vectors * np.maximum(eigenvalues, 0.0)) @ vectors.T
    change = float(np.linalg.norm(repaired - var))
    scale = float(np.linalg.norm(var))
    if change > REPAIR_RTOL * scale:
        raise CovarianceRepairError(
            f"PSD repair changed the covariance by {change:.3g} (norm {scale:.3g})"
        )
    return 0.5 * (repaired + repaired.T)


def normal_ci(
    theta_hat: np.ndarray,
    var_theta: np.ndarray,
    level: float = 0.95,
    names: Optional[List[str]] = None,
) -> List[ConfidenceInterval]:
    """theta_j +/- z_{(1+level)/2} * sqrt(var_jj) per coordinate."""
    if not 0.0 < level < 1.0:
        raise InvalidParameterError(f"level must lie in (0, 1), got {level}")
    theta_hat = np.asarray(theta_hat, dtype=float)
    diag = np.diag(np.atleast_2d(var_theta))
    names = names or [f"theta_{j}" for j in range(theta_hat.size)]
    z = float(norm.ppf(0.5 * (1.0 + level)))
    intervals = []
    for name, estimate, variance in zip(names, theta_hat, diag):
        flags: Tuple[str, ...] = ()
        if variance < 0:
            flags = ("negative_variance",)
            variance = 0.0
        se = math.sqrt(variance)
        intervals.append(
            ConfidenceInterval(
                coordinate=name,
                estimate=float(estimate),
                se=se,
                lo=float(estimate - z * se),
                hi=float(estimate + z * se),
                flags=flags,
            )
        )
    return intervals


def estimate_variance(
    theta_hat: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    inference: Optional[InferenceConfig] = None,
    trace: Optional[IBTrace] = None,
) -> VarianceEstimate:
    """Full sandwich estimate at a finished IB run."""
    inference = inference or InferenceConfig()
    simulated = cfg.model_copy(update={"analytic": False})
    sigma_pi = bootstrap_cov_pi(theta_hat, binding, simulated, inference, trace)
    B_hat = numerical_jacobian_B(theta_hat, binding, cfg, inference.jacobian_step)
    H = math.inf if cfg.analytic else cfg.H
    return VarianceEstimate(
        sigma_pi=sigma_pi,
        B_hat=B_hat,
        var_theta=assemble_var_theta(sigma_pi, B_hat, H),
        H_used=inference.resolved_H_var(cfg.H),
    )
