"""Problem bindings: the (simulate, fit) pair the IB engine iterates over."""

from dataclasses import dataclass, replace
from typing import Any, Callable, Optional, Tuple

import numpy as np

from ib_bias.config import EstimatorSpec
from ib_bias.models import Dataset, EstimatorKind, FitResult, GlmmDesign, LogisticDesign
from ib_bias.sim.simulate import (
    LOG_SIGMA2_MAX,
    LOG_SIGMA2_MIN,
    SMOOTHING_BANDWIDTH,
    simulate_glmm,
    simulate_logistic,
)
from ib_bias.stats.glmm import glmm_ghq, glmm_pirls
from ib_bias.stats.logistic import logistic_firth, logistic_irls, pseudo_values
from ib_bias.stats.robust import robust_m_estimator

ESTIMATORS = {
    EstimatorKind.LOGISTIC_MLE: logistic_irls,
    EstimatorKind.LOGISTIC_FIRTH: logistic_firth,
    EstimatorKind.LOGISTIC_ROBUST: robust_m_estimator,
    EstimatorKind.GLMM_PIRLS: glmm_pirls,
    EstimatorKind.GLMM_GHQ: glmm_ghq,
}

# Estimators that see pseudo-valued responses; Firth and GHQ need binary y.
PSEUDO_VALUED = {
    EstimatorKind.LOGISTIC_MLE,
    EstimatorKind.LOGISTIC_ROBUST,
    EstimatorKind.GLMM_PIRLS,
}


@dataclass(frozen=True)
class ProblemBinding:
    """Simulator and initial estimator for one fixed design.

    ``exact`` is the analytic binding function used in H = inf mode and
    ``clamp`` projects an iterate back into the valid region, returning
    whether it moved. ``nested`` marks fits that are themselves IB runs and
    report their inner fit count in ``FitResult.iterations``. ``smoothed``
    simulates with kernel-smoothed responses so that seed-frozen maps are
    differentiable; finite differences use it in place of ``simulate``.
    """

    simulate: Callable[[np.ndarray, np.random.Generator], Any]
    fit: Callable[[Any], FitResult]
    dim: int
    exact: Optional[Callable[[np.ndarray], np.ndarray]] = None
    clamp: Optional[Callable[[np.ndarray], Tuple[np.ndarray, bool]]] = None
    nested: bool = False
    name: str = "binding"
    smoothed: Optional[Callable[[np.ndarray, np.random.Generator], Any]] = None

    def estimate(self, theta: np.ndarray, seed: np.random.Generator) -> FitResult:
        return self.fit(self.simulate(theta, seed))

    def for_differences(self) -> "ProblemBinding":
        if self.smoothed is None:
            return self
        return replace(self, simulate=self.smoothed, smoothed=None)


def fit_estimator(dataset: Dataset, spec: EstimatorSpec) -> FitResult:
    """Run the estimator named by ``spec.kind``, pseudo-transforming y first
    when the estimator works on pseudo-values."""
    kind = EstimatorKind(spec.kind)
    y = dataset.y
    if kind in PSEUDO_VALUED and spec.delta > 0:
        y = pseudo_values(y, spec.delta)
    return ESTIMATORS[kind](dataset.design, y, spec)


def clamp_log_sigma2(theta: np.ndarray) -> Tuple[np.ndarray, bool]:
    value = float(np.clip(theta[-1], LOG_SIGMA2_MIN, LOG_SIGMA2_MAX))
    if value == theta[-1]:
        return theta, False
    clamped = np.array(theta, dtype=float)
    clamped[-1] = value
    return clamped, True


def logistic_binding(design: LogisticDesign, spec: EstimatorSpec) -> ProblemBinding:
    """Binding for the logistic model with any logistic initial estimator."""

    def simulate(theta: np.ndarray, seed: np.random.Generator) -> Dataset:
        return simulate_logistic(design, theta, seed)

    def smoothed(theta: np.ndarray, seed: np.random.Generator) -> Dataset:
        return simulate_logistic(design, theta, seed, SMOOTHING_BANDWIDTH)

    def fit(dataset: Dataset) -> FitResult:
        return fit_estimator(dataset, spec)

    return ProblemBinding(
        simulate=simulate,
        fit=fit,
        dim=design.q,
        name=f"logistic/{EstimatorKind(spec.kind).value}",
        smoothed=smoothed,
    )


def glmm_binding(design: GlmmDesign, spec: EstimatorSpec) -> ProblemBinding:
    """Binding for the random-intercept model; log sigma2 iterates are clamped."""

    def simulate(theta: np.ndarray, seed: np.random.Generator) -> Dataset:
        return simulate_glmm(design, theta, seed)

    def smoothed(theta: np.ndarray, seed: np.random.Generator) -> Dataset:
        return simulate_glmm(design, theta, seed, SMOOTHING_BANDWIDTH)

    def fit(dataset: Dataset) -> FitResult:
        return fit_estimator(dataset, spec)

    return ProblemBinding(
        simulate=simulate,
        fit=fit,
        dim=design.dim,
        clamp=clamp_log_sigma2,
        name=f"glmm/{EstimatorKind(spec.kind).value}",
        smoothed=smoothed,
    )


def binding_for(design: Any, spec: EstimatorSpec) -> ProblemBinding:
    if isinstance(design, GlmmDesign):
        return glmm_binding(design, spec)
    return logistic_binding(design, spec)
