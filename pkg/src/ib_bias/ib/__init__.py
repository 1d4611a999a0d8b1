"""Iterative bootstrap engine and problem bindings."""

from ib_bias.ib.binding import (
    ProblemBinding,
    binding_for,
    fit_estimator,
    glmm_binding,
    logistic_binding,
)
from ib_bias.ib.engine import (
    IBTrace,
    StepEvaluation,
    bootstrap_bias_corrected,
    convergence_rate_fit,
    evaluate_binding,
    ib_run,
    ib_step,
    ii_objective,
    ii_residual,
    two_step_ib,
)

__all__ = [
    "IBTrace",
    "ProblemBinding",
    "StepEvaluation",
    "binding_for",
    "bootstrap_bias_corrected",
    "convergence_rate_fit",
    "evaluate_binding",
    "fit_estimator",
    "glmm_binding",
    "ib_run",
    "ib_step",
    "ii_objective",
    "ii_residual",
    "logistic_binding",
    "two_step_ib",
]
