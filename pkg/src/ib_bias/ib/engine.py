"""Iterative bootstrap fixed-point engine.

The IB sequence is

    theta_k = theta_{k-1} + eps_k * (pi_obs - mean_h pi*_h(theta_{k-1}))

where pi*_h fits the initial estimator to data simulated at theta_{k-1}
with seed h. With fixed seeds the map is deterministic and its limit is an
exact root of the indirect-inference residual.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from scipy.stats import linregress

from ib_bias.config import IBConfig
from ib_bias.errors import (
    IBBiasError,
    InnerFailureBudgetExceeded,
    InsufficientPointsError,
    InvalidParameterError,
    MaxIterExceeded,
    NotPositiveDefiniteError,
)
from ib_bias.ib.binding import ProblemBinding
from ib_bias.models import FitResult
from ib_bias.sim.rng import SeedSet, Stream, derive_seed

logger = logging.getLogger(__name__)

RATE_NOISE_FLOOR = 1e-12
RATE_MIN_POINTS = 5
RESCUE_PATIENCE = 10
STALL_PATIENCE = 5


@dataclass
class StepEvaluation:
    """Simulated estimates at one parameter value."""

    mean: np.ndarray
    estimates: np.ndarray
    failures: int
    total: int
    nested_fits: int = 0


@dataclass
class IBTrace:
    """History of one IB run."""

    iterates: List[np.ndarray]
    step_norms: List[float] = field(default_factory=list)
    residual_norm: float = math.nan
    converged: bool = False
    inner_failures: int = 0
    wall_time: float = 0.0
    damping: List[float] = field(default_factory=list)
    restarts: List[int] = field(default_factory=list)
    clamped: int = 0
    n_fits: int = 0
    stage_fits: List[int] = field(default_factory=list)
    final_estimates: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def theta(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def iterations(self) -> int:
        return len(self.step_norms)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterates": [[float(v) for v in theta] for theta in self.iterates],
            "step_norms": [float(v) for v in self.step_norms],
            "residual_norm": float(self.residual_norm),
            "converged": bool(self.converged),
            "inner_failures": int(self.inner_failures),
            "wall_time": float(self.wall_time),
            "damping": [float(v) for v in self.damping],
            "restarts": list(self.restarts),
            "clamped": int(self.clamped),
            "n_fits": int(self.n_fits),
            "stage_fits": list(self.stage_fits),
        }


def simulation_index(cfg: IBConfig, k: int, h: int) -> int:
    """Seed index on the simulation stream for draw h of iteration k."""
    if cfg.fixed_seeds:
        return h
    return (k - 1) * cfg.H + h


def _estimate_one(
    binding: ProblemBinding, theta: np.ndarray, master: int, index: int
) -> Tuple[Optional[np.ndarray], bool, int]:
    """(theta_hat or None if unusable, converged, nested fit count)."""
    seed = derive_seed(master, Stream.IB_SIMULATION, index)
    try:
        result: FitResult = binding.estimate(theta, seed)
    except (IBBiasError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.debug("inner fit %d failed: %s", index, exc)
        return None, False, 0
    nested = int(result.iterations) if binding.nested else 0
    if not result.finite:
        return None, False, nested
    return np.asarray(result.theta_hat, dtype=float), bool(result.converged), nested


def simulated_estimates(
    binding: ProblemBinding,
    tasks: Sequence[Tuple[np.ndarray, int]],
    seed_set: SeedSet,
    n_jobs: int = 1,
) -> List[Tuple[Optional[np.ndarray], bool, int]]:
    """Fit (theta, seed index) tasks, returned in submission order."""
    if n_jobs == 1 or len(tasks) <= 1:
        return [_estimate_one(binding, theta, seed_set.master, h) for theta, h in tasks]
    return joblib.Parallel(n_jobs=n_jobs)(
        joblib.delayed(_estimate_one)(binding, theta, seed_set.master, h)
        for theta, h in tasks
    )


def collect_estimates(
    results: Sequence[Tuple[Optional[np.ndarray], bool, int]], dim: int
) -> StepEvaluation:
    usable = [theta for theta, _, _ in results if theta is not None]
    failures = sum(1 for theta, ok, _ in results if theta is None or not ok)
    nested = sum(count for _, _, count in results)
    estimates = np.vstack(usable) if usable else np.empty((0, dim))
    mean = estimates.mean(axis=0) if usable else np.full(dim, np.nan)
    return StepEvaluation(
        mean=mean,
        estimates=estimates,
        failures=failures,
        total=len(results),
        nested_fits=nested,
    )


def evaluate_binding(
    theta: np.ndarray, binding: ProblemBinding, cfg: IBConfig, k: int = 1
) -> StepEvaluation:
    """Average of the H simulated estimates at ``theta`` (exact map if analytic)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (binding.dim,):
        raise InvalidParameterError(
            f"theta has length {theta.size}, binding expects {binding.dim}"
        )
    if cfg.analytic:
        if binding.exact is None:
            raise InvalidParameterError(f"{binding.name} has no exact binding function")
        return StepEvaluation(
            mean=np.asarray(binding.exact(theta), dtype=float),
            estimates=np.empty((0, binding.dim)),
            failures=0,
            total=0,
        )
    tasks = [(theta, simulation_index(cfg, k, h)) for h in range(1, cfg.H + 1)]
    results = simulated_estimates(binding, tasks, cfg.seed_set, cfg.n_jobs)
    return collect_estimates(results, binding.dim)


def check_failure_budget(evaluation: StepEvaluation, cfg: IBConfig) -> None:
    if evaluation.total == 0:
        return
    usable = evaluation.estimates.shape[0]
    if usable == 0 or evaluation.failures > cfg.inner_failure_budget * evaluation.total:
        raise InnerFailureBudgetExceeded(
            evaluation.failures, evaluation.total, cfg.inner_failure_budget
        )


def bootstrap_bias_corrected(pi_obs: np.ndarray, simulated: np.ndarray) -> np.ndarray:
    """Efron bias correction pi_obs - (mean(simulated) - pi_obs).

    ``simulated`` holds one bootstrap estimate per row.
    """
    pi_obs = np.asarray(pi_obs, dtype=float)
    bias = np.asarray(simulated, dtype=float).mean(axis=0) - pi_obs
    return pi_obs - bias


def ib_step(
    theta_prev: np.ndarray,
    pi_obs: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    k: int = 1,
    evaluation: Optional[StepEvaluation] = None,
) -> np.ndarray:
    """One damped IB update from ``theta_prev``."""
    if evaluation is None:
        evaluation = evaluate_binding(theta_prev, binding, cfg, k)
    check_failure_budget(evaluation, cfg)
    epsilon = cfg.damping.at(k)
    return np.asarray(theta_prev, dtype=float) + epsilon * (
        np.asarray(pi_obs, dtype=float) - evaluation.mean
    )


def ib_run(
    pi_obs: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    theta0: Optional[np.ndarray] = None,
    strict: bool = True,
) -> Tuple[np.ndarray, IBTrace]:
    """Iterate the IB map from ``theta0`` (default ``pi_obs``) to a fixed point.

    Stops when the step norm drops to ``cfg.tolerance(p)`` or after
    ``cfg.max_iter`` steps. With ``strict`` a run that did not converge
    raises MaxIterExceeded carrying the trace.

    With ``cfg.rescue`` the step multiplier is halved and the run restarted
    from the best iterate when step norms grow ``RESCUE_PATIENCE`` times in a
    row. It is also halved, without a restart, when ``STALL_PATIENCE`` steps
    pass without a new smallest step while some coordinate keeps reversing
    direction. Simulated binary responses make the averaged binding map
    piecewise constant, so iterates near the solution bounce across a jump;
    the halving settles them on it and ``residual_norm`` then reports the
    size of that jump. ``trace.restarts`` lists the iterations where the
    multiplier was halved.
    """
    pi_obs = np.asarray(pi_obs, dtype=float)
    if pi_obs.shape != (binding.dim,):
        raise InvalidParameterError(
            f"pi_obs has length {pi_obs.size}, binding expects {binding.dim}"
        )
    tol = cfg.tolerance(binding.dim)
    theta = pi_obs.copy() if theta0 is None else np.asarray(theta0, dtype=float).copy()
    if binding.clamp is not None:
        theta, _ = binding.clamp(theta)

    trace = IBTrace(iterates=[theta.copy()])
    started = time.perf_counter()
    scale = 1.0
    increases = 0
    since_best = 0
    reversing = False
    last_step: Optional[np.ndarray] = None
    best_theta, best_norm = theta.copy(), math.inf

    for k in range(1, cfg.max_iter + 1):
        evaluation = evaluate_binding(theta, binding, cfg, k)
        trace.n_fits += evaluation.total + evaluation.nested_fits
        trace.inner_failures += evaluation.failures
        check_failure_budget(evaluation, cfg)

        epsilon = cfg.damping.at(k) * scale
        new = theta + epsilon * (pi_obs - evaluation.mean)
        if binding.clamp is not None:
            new, moved = binding.clamp(new)
            trace.clamped += int(moved)
        step = new - theta
        norm = float(np.linalg.norm(step))
        trace.iterates.append(new.copy())
        trace.step_norms.append(norm)
        trace.damping.append(epsilon)
        logger.debug("IB k=%d step_norm=%.3e eps=%.3g", k, norm, epsilon)

        if not math.isfinite(norm):
            theta = new
            break
        if norm <= tol:
            theta = new
            trace.converged = True
            break
        if norm < best_norm:
            best_theta, best_norm = theta.copy(), norm
            since_best, reversing = 0, False
        else:
            since_best += 1
            if last_step is not None and bool(np.any(step * last_step < 0)):
                reversing = True

        previous = trace.step_norms[-2] if len(trace.step_norms) > 1 else math.inf
        increases = increases + 1 if norm > previous else 0
        theta, last_step = new, step
        if not cfg.rescue:
            continue
        growing = cfg.damping.kind == "constant" and increases >= RESCUE_PATIENCE
        stalled = reversing and since_best >= STALL_PATIENCE
        if growing or stalled:
            scale *= 0.5
            increases, since_best, reversing, last_step = 0, 0, False, None
            if growing:
                theta = best_theta.copy()
            trace.restarts.append(k)
            logger.info(
                "IB step norms %s at k=%d; eps scaled to x%.3g",
                "kept growing" if growing else "stalled",
                k,
                scale,
            )

    if math.isfinite(float(np.linalg.norm(theta))):
        final = evaluate_binding(theta, binding, cfg, 1)
        trace.n_fits += final.total + final.nested_fits
        trace.residual_norm = float(np.linalg.norm(pi_obs - final.mean))
        if cfg.fixed_seeds and final.total:
            trace.final_estimates = final.estimates
    trace.wall_time = time.perf_counter() - started
    trace.stage_fits.append(trace.n_fits)

    if trace.converged:
        logger.info(
            "IB converged in %d iterations (residual %.3e)",
            trace.iterations,
            trace.residual_norm,
        )
    elif strict:
        raise MaxIterExceeded(
            f"IB did not converge in {trace.iterations} iterations "
            f"(last step norm {trace.step_norms[-1]:.3e}, tol {tol:.1e})",
            trace=trace,
        )
    else:
        logger.warning("IB stopped without converging after %d iterations", trace.iterations)
    return theta, trace


def ii_residual(
    theta: np.ndarray, pi_obs: np.ndarray, binding: ProblemBinding, cfg: IBConfig
) -> np.ndarray:
    """pi_obs - mean_h pi*_h(theta) with the fixed simulation seeds."""
    evaluation = evaluate_binding(theta, binding, cfg, 1)
    check_failure_budget(evaluation, cfg)
    return np.asarray(pi_obs, dtype=float) - evaluation.mean


def ii_objective(
    theta: np.ndarray,
    pi_obs: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    phi: Optional[np.ndarray] = None,
) -> float:
    """Indirect-inference distance r' Phi r (Phi = I by default)."""
    residual = ii_residual(theta, pi_obs, binding, cfg)
    if phi is None:
        return float(residual @ residual)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (binding.dim, binding.dim) or not np.allclose(phi, phi.T):
        raise NotPositiveDefiniteError("Phi must be a symmetric p x p matrix")
    try:
        np.linalg.cholesky(phi)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("Phi is not positive definite") from exc
    return float(residual @ phi @ residual)


def convergence_rate_fit(trace: IBTrace) -> Tuple[float, float]:
    """Fit log step_norm = a + k log(eps); returns (eps_hat, R^2)."""
    norms = np.asarray(trace.step_norms, dtype=float)
    k = np.arange(1, norms.size + 1, dtype=float)
    usable = np.isfinite(norms) & (norms > RATE_NOISE_FLOOR)
    if int(usable.sum()) < RATE_MIN_POINTS:
        raise InsufficientPointsError(
            f"{int(usable.sum())} usable step norms, need {RATE_MIN_POINTS}"
        )
    fit = linregress(k[usable], np.log(norms[usable]))
    return float(np.exp(fit.slope)), float(fit.rvalue**2)


def nested_ib_binding(binding: ProblemBinding, inner: IBConfig) -> ProblemBinding:
    """Binding whose estimator is the IB estimator itself.

    Every dataset, observed or simulated, is corrected with the same nested
    seeds so the new estimator is one fixed function of the data.
    """

    def fit(dataset: Any) -> FitResult:
        start = binding.fit(dataset)
        if not start.finite:
            return FitResult(start.kind, start.theta_hat, False, 0, math.nan, start.flags)
        theta, trace = ib_run(start.theta_hat, binding, inner, strict=False)
        return FitResult(
            kind=f"IB({start.kind})",
            theta_hat=theta,
            converged=trace.converged,
            iterations=trace.n_fits + 1,
            final_grad_norm=trace.residual_norm,
            flags=start.flags,
        )

    def exact(theta: np.ndarray) -> np.ndarray:
        limit, _ = ib_run(binding.exact(theta), binding, inner, strict=False)  # type: ignore[misc]
        return limit

    return ProblemBinding(
        simulate=binding.simulate,
        fit=fit,
        dim=binding.dim,
        exact=exact if binding.exact is not None else None,
        clamp=binding.clamp,
        nested=True,
        name=f"ib/{binding.name}",
    )


def two_step_ib(
    pi_obs: np.ndarray,
    binding: ProblemBinding,
    cfg: IBConfig,
    strict: bool = True,
) -> Tuple[np.ndarray, IBTrace]:
    """Run IB, then re-run IB with the IB estimator as the initial estimator.

    Both the first stage and every nested correction use the seeds of the
    nested-IB stream; the second stage simulates with ``cfg.seed_set``.
    """
    inner = cfg.model_copy(
        update={"seed_set": cfg.seed_set.child(Stream.NESTED_IB, 0), "n_jobs": 1}
    )
    first, first_trace = ib_run(pi_obs, binding, inner, strict=True)
    stage_two = nested_ib_binding(binding, inner)
    second, trace = ib_run(first, stage_two, cfg, strict=strict)
    trace.stage_fits = [first_trace.n_fits, trace.n_fits]
    trace.n_fits += first_trace.n_fits
    return second, trace
