"""Random-intercept logistic model fits: PIRLS initial estimator and GHQ MLE.

Both return the packed vector (beta0, beta_1..beta_q, log sigma2).
"""

import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, logsumexp

from ib_bias.config import EstimatorSpec, IrlsControl
from ib_bias.errors import DimensionMismatchError, InvalidParameterError, QuadratureError
from ib_bias.models import EstimatorKind, FitResult, GlmmDesign
from ib_bias.sim.simulate import LOG_SIGMA2_MAX, LOG_SIGMA2_MIN
from ib_bias.stats.logistic import check_response, logistic_irls, newton_solve

logger = logging.getLogger(__name__)

PIRLS_START_SIGMA2 = 0.5
GHQ_GRAD_TOL = 1e-6
# GHQ never starts the variance search closer to the floor than this.
GHQ_MIN_START_SIGMA2 = 0.05
MODE_MAX_ITER = 50
MODE_MAX_STEP = 2.0


def cluster_sum(values: np.ndarray, cluster: np.ndarray, m: int) -> np.ndarray:
    """Sum rows of ``values`` within clusters, in row order."""
    out = np.zeros((m,) + values.shape[1:])
    np.add.at(out, cluster, values)
    return out


def _glmm_response(design: GlmmDesign, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (design.n,):
        raise DimensionMismatchError(
            f"y has shape {y.shape}, design has {design.n} rows"
        )
    return check_response(design.pooled(), y)


class PenalizedMode:
    """Joint mode of l(b, u) - sum u^2 / (2 sigma2) at fixed sigma2."""

    def __init__(self, design: GlmmDesign, y: np.ndarray, control: IrlsControl):
        self.Z = design.fixed_effects_matrix()
        self.cluster = design.cluster
        self.m = int(design.m)  # type: ignore[arg-type]
        self.p = self.Z.shape[1]
        self.y = y
        self.control = control

    def split(self, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return params[: self.p], params[self.p :]

    def eta(self, params: np.ndarray) -> np.ndarray:
        b, u = self.split(params)
        return self.Z @ b + u[self.cluster]

    def penalized_log_likelihood(self, params: np.ndarray, sigma2: float) -> float:
        _, u = self.split(params)
        eta = self.eta(params)
        ll = float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))
        return ll - float(u @ u) / (2.0 * sigma2)

    def fit(self, sigma2: float, start: np.ndarray):
        Z, cluster, m, n = self.Z, self.cluster, self.m, self.Z.shape[0]

        def evaluate(params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            _, u = self.split(params)
            mu = expit(self.eta(params))
            r = self.y - mu
            w = mu * (1.0 - mu)
            grad = np.concatenate([Z.T @ r, cluster_sum(r, cluster, m) - u / sigma2])
            h_bb = (Z * w[:, np.newaxis]).T @ Z
            h_bu = cluster_sum(Z * w[:, np.newaxis], cluster, m).T
            h_uu = np.diag(cluster_sum(w, cluster, m) + 1.0 / sigma2)
            hess = np.block([[h_bb, h_bu], [h_bu.T, h_uu]])
            return grad / n, np.linalg.solve(hess, grad)

        return newton_solve(
            start,
            evaluate,
            lambda params: self.penalized_log_likelihood(params, sigma2),
            self.control,
        )

    def laplace_deviance(self, params: np.ndarray, sigma2: float) -> float:
        """-2 (penalized log-likelihood) + sum_j log(1 + sigma2 * sum_i V_ij)."""
        mu = expit(self.eta(params))
        w_sum = cluster_sum(mu * (1.0 - mu), self.cluster, self.m)
        return -2.0 * self.penalized_log_likelihood(params, sigma2) + float(
            np.sum(np.log1p(sigma2 * w_sum))
        )


def glmm_pirls(
    design: GlmmDesign, y: np.ndarray, spec: Optional[EstimatorSpec] = None
) -> FitResult:
    """Penalized IRLS fit with the variance profiled on the Laplace deviance.

    Starts from the pooled logistic fit with sigma2 = 0.5. A variance at the
    1e-8 floor is pinned there and flagged ``boundary``.
    """
    spec = spec or EstimatorSpec(kind=EstimatorKind.GLMM_PIRLS)
    y = _glmm_response(design, y)
    if int(design.m) < 2:  # type: ignore[arg-type]
        raise InvalidParameterError("glmm_pirls needs at least two clusters")

    flags: Tuple[str, ...] = ()
    if np.all(design.n_i <= 1):
        flags += ("degenerate_variance",)

    problem = PenalizedMode(design, y, spec.irls)
    pooled = logistic_irls(design.pooled(), y, spec)
    state = {
        "params": np.concatenate([pooled.theta_hat, np.zeros(problem.m)]),
        "result": None,
    }

    def deviance(log_sigma2: float) -> float:
        sigma2 = math.exp(log_sigma2)
        result = problem.fit(sigma2, state["params"])
        if np.all(np.isfinite(result[0])):
            state["params"] = result[0]
        state["result"] = result
        return problem.laplace_deviance(result[0], sigma2)

    deviance(math.log(PIRLS_START_SIGMA2))
    outer = minimize_scalar(
        deviance,
        bounds=(LOG_SIGMA2_MIN, LOG_SIGMA2_MAX),
        method="bounded",
        options={"xatol": 1e-6, "maxiter": 500},
    )
    log_sigma2 = float(outer.x)
    best = float(outer.fun)
    if deviance(LOG_SIGMA2_MIN) <= best:
        log_sigma2 = LOG_SIGMA2_MIN
        flags += ("boundary",)
    elif LOG_SIGMA2_MAX - log_sigma2 < 1e-3:
        flags += ("variance_ceiling",)
    deviance(log_sigma2)

    params, inner_converged, iterations, grad_norm, inner_flags = state["result"]
    b, _ = problem.split(params)
    converged = bool(inner_converged and outer.success)
    if not converged:
        logger.debug("glmm_pirls did not converge %s", inner_flags)
    return FitResult(
        kind=EstimatorKind.GLMM_PIRLS.value,
        theta_hat=np.concatenate([b, [log_sigma2]]),
        converged=converged,
        iterations=iterations + int(outer.nfev),
        final_grad_norm=grad_norm,
        flags=flags + inner_flags,
    )


class MarginalLikelihood:
    """Adaptive Gauss-Hermite approximation of the marginal log-likelihood."""

    def __init__(self, design: GlmmDesign, y: np.ndarray, nodes: int):
        z, w = hermgauss(nodes)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(w)) and np.all(w > 0)):
            raise QuadratureError(f"invalid Gauss-Hermite rule with {nodes} nodes")
        self.Z = design.fixed_effects_matrix()
        self.cluster = design.cluster
        self.m = int(design.m)  # type: ignore[arg-type]
        self.y = y
        self.nodes = z
        self.log_weights = np.log(w) + z**2
        self.modes = np.zeros(self.m)

    def _modes(self, eta: np.ndarray, sigma2: float) -> Tuple[np.ndarray, np.ndarray]:
        """Per-cluster posterior modes of u and curvature scales tau."""
        u = self.modes.copy()
        for _ in range(MODE_MAX_ITER):
            mu = expit(eta + u[self.cluster])
            grad = cluster_sum(self.y - mu, self.cluster, self.m) - u / sigma2
            curv = cluster_sum(mu * (1.0 - mu), self.cluster, self.m) + 1.0 / sigma2
            step = np.clip(grad / curv, -MODE_MAX_STEP, MODE_MAX_STEP)
            u = u + step
            if np.max(np.abs(step)) < 1e-10:
                break
        mu = expit(eta + u[self.cluster])
        curv = cluster_sum(mu * (1.0 - mu), self.cluster, self.m) + 1.0 / sigma2
        self.modes = u
        return u, 1.0 / np.sqrt(curv)

    def value_and_grad(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Quadrature log-likelihood and its exact gradient.

        The nodes u_k = mode + sqrt(2) tau z_k move with theta. The mode
        derivative follows from implicit differentiation of the mode
        equation, tau's from the curvature at the mode, and both enter
        through the chain rule, so the gradient is that of the approximation
        itself rather than of the exact integral.
        """
        b, log_sigma2 = theta[:-1], theta[-1]
        eta = self.Z @ b
        if log_sigma2 == -np.inf:
            mu = expit(eta)
            value = float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))
            return value, np.concatenate([self.Z.T @ (self.y - mu), [0.0]])

        sigma2 = math.exp(log_sigma2)
        modes, tau = self._modes(eta, sigma2)
        u = modes[:, np.newaxis] + math.sqrt(2.0) * tau[:, np.newaxis] * self.nodes
        eta_k = eta[:, np.newaxis] + u[self.cluster]
        ll = cluster_sum(
            self.y[:, np.newaxis] * eta_k - np.logaddexp(0.0, eta_k),
            self.cluster,
            self.m,
        )
        log_terms = self.log_weights + ll - u**2 / (2.0 * sigma2)
        lse = logsumexp(log_terms, axis=1)
        per_cluster = (
            np.log(math.sqrt(2.0) * tau) - 0.5 * math.log(2.0 * math.pi * sigma2) + lse
        )
        value = float(np.sum(per_cluster))
        if not math.isfinite(value):
            raise QuadratureError("marginal log-likelihood is not finite")

        post = np.exp(log_terms - lse[:, np.newaxis])
        node_resid = self.y[:, np.newaxis] - expit(eta_k)
        resid = np.sum(post[self.cluster] * node_resid, axis=1)
        grad_b = self.Z.T @ resid
        grad_log_sigma2 = float(np.sum(post * (u**2 / (2.0 * sigma2) - 0.5)))

        # Movement of the nodes with theta.
        curv = 1.0 / tau**2
        mu0 = expit(eta + modes[self.cluster])
        w0 = mu0 * (1.0 - mu0)
        w1 = w0 * (1.0 - 2.0 * mu0)
        weighted = cluster_sum(self.Z * w0[:, np.newaxis], self.cluster, self.m)
        dmode_db = -weighted / curv[:, np.newaxis]
        dmode_ds = modes / (sigma2 * curv)
        dcurv_db = cluster_sum(
            w1[:, np.newaxis] * (self.Z + dmode_db[self.cluster]), self.cluster, self.m
        )
        dcurv_ds = cluster_sum(w1 * dmode_ds[self.cluster], self.cluster, self.m) - 1.0 / sigma2
        dlogtau_db = -0.5 * dcurv_db / curv[:, np.newaxis]
        dlogtau_ds = -0.5 * dcurv_ds / curv

        slope = cluster_sum(node_resid, self.cluster, self.m) - u / sigma2
        shift = np.sum(post * slope, axis=1)
        spread = 1.0 + tau * np.sum(post * slope * math.sqrt(2.0) * self.nodes, axis=1)
        grad_b = grad_b + spread @ dlogtau_db + shift @ dmode_db
        grad_log_sigma2 += float(spread @ dlogtau_ds + shift @ dmode_ds)
        return value, np.concatenate([grad_b, [grad_log_sigma2]])


def glmm_ghq(
    design: GlmmDesign,
    y: np.ndarray,
    spec: Optional[EstimatorSpec] = None,
    fixed: Optional[Dict[int, float]] = None,
    theta0: Optional[np.ndarray] = None,
) -> FitResult:
    """Maximum likelihood by adaptive Gauss-Hermite quadrature.

    ``fixed`` maps packed indices to held values; ``{q + 1: -inf}`` fixes
    sigma2 = 0, where the likelihood is the plain logistic one. Without
    ``theta0`` the search starts from glmm_pirls (pooled fit for m < 2).
    """
    spec = spec or EstimatorSpec(kind=EstimatorKind.GLMM_GHQ)
    y = _glmm_response(design, y)
    fixed = dict(fixed or {})
    dim = design.dim
    if any(not 0 <= idx < dim for idx in fixed):
        raise DimensionMismatchError(f"fixed indices must lie in 0..{dim - 1}")

    if theta0 is not None:
        start = np.asarray(theta0, dtype=float).copy()
        if start.shape != (dim,):
            raise DimensionMismatchError(f"theta0 has length {start.size}, expected {dim}")
    elif int(design.m) >= 2:  # type: ignore[arg-type]
        start = glmm_pirls(design, y, spec).theta_hat.copy()
    else:
        pooled = logistic_irls(design.pooled(), y, spec).theta_hat
        start = np.concatenate([pooled, [math.log(PIRLS_START_SIGMA2)]])
    start[-1] = max(start[-1], math.log(GHQ_MIN_START_SIGMA2))
    for idx, value in fixed.items():
        start[idx] = value

    free = np.array([i for i in range(dim) if i not in fixed], dtype=int)
    likelihood = MarginalLikelihood(design, y, spec.ghq_nodes)
    n = design.n

    def full(x: np.ndarray) -> np.ndarray:
        theta = start.copy()
        theta[free] = x
        return theta

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = likelihood.value_and_grad(full(x))
        return -value / n, -grad[free] / n

    bounds = [
        (LOG_SIGMA2_MIN, LOG_SIGMA2_MAX) if i == dim - 1 else (None, None) for i in free
    ]
    iterations = 0
    if free.size:
        result = minimize(
            objective,
            start[free],
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 1000, "gtol": 1e-10, "ftol": 1e-15},
        )
        theta = full(result.x)
        iterations = int(result.nit)
    else:
        theta = start

    _, grad = likelihood.value_and_grad(theta)
    grad = grad[free] / n
    flags: Tuple[str, ...] = ()
    if dim - 1 in free and theta[-1] <= LOG_SIGMA2_MIN + 1e-8:
        flags += ("boundary",)
        grad = np.where(free == dim - 1, np.maximum(grad, 0.0), grad)
    grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    tol = max(spec.irls.tol, GHQ_GRAD_TOL)
    converged = bool(np.all(np.isfinite(theta[free])) and grad_norm <= tol)
    if not converged:
        logger.debug("glmm_ghq gradient norm %.3g above %.1g", grad_norm, tol)
    return FitResult(
        kind=EstimatorKind.GLMM_GHQ.value,
        theta_hat=theta,
        converged=converged,
        iterations=iterations,
        final_grad_norm=grad_norm,
        flags=flags,
    )
