"""Data generation for the logistic and random-intercept logistic models."""

import math
from typing import Tuple

import numpy as np
from scipy.special import expit

from ib_bias.errors import DimensionMismatchError, InvalidParameterError
from ib_bias.models import Dataset, GlmmDesign, LogisticDesign

SIGMA2_FLOOR = 1e-8
SIGMA2_CEILING = 1e4
LOG_SIGMA2_MIN = math.log(SIGMA2_FLOOR)
LOG_SIGMA2_MAX = math.log(SIGMA2_CEILING)
# Kernel width of the smoothed draws behind finite-difference Jacobians.
SMOOTHING_BANDWIDTH = 0.02


def pack_glmm_theta(beta0: float, beta: np.ndarray, sigma2: float) -> np.ndarray:
    """Pack (beta0, beta, sigma2) into (beta0, beta, log sigma2).

    ``sigma2 == 0`` packs to ``-inf``, the degenerate no-random-effect model.
    """
    if sigma2 < 0:
        raise InvalidParameterError(f"sigma2 must be >= 0, got {sigma2}")
    log_s2 = -math.inf if sigma2 == 0 else math.log(sigma2)
    return np.concatenate([[float(beta0)], np.asarray(beta, dtype=float), [log_s2]])


def unpack_glmm_theta(theta: np.ndarray) -> Tuple[float, np.ndarray, float]:
    """Inverse of pack_glmm_theta; returns sigma2 on the variance scale."""
    theta = np.asarray(theta, dtype=float)
    return float(theta[0]), theta[1:-1], float(np.exp(theta[-1]))


def bernoulli_responses(
    u: np.ndarray, mu: np.ndarray, bandwidth: float = 0.0
) -> np.ndarray:
    """1{u < mu}, or its logistic-kernel smoothing when ``bandwidth > 0``.

    The smoothed draw is differentiable in mu and keeps the mean mu up to
    terms of order bandwidth * exp(-min(mu, 1 - mu) / bandwidth).
    """
    if bandwidth > 0:
        return expit((mu - u) / bandwidth)
    return (u < mu).astype(float)


def draw_covariates(
    n: int, q: int, mean: float, sd: float, gen: np.random.Generator
) -> np.ndarray:
    """Independent N(mean, sd) covariates, filled column by column."""
    return mean + sd * gen.standard_normal((q, n)).T


def simulate_logistic(
    design: LogisticDesign,
    theta: np.ndarray,
    seed: np.random.Generator,
    bandwidth: float = 0.0,
) -> Dataset:
    """Bernoulli responses with logit link at ``theta``.

    ``bandwidth > 0`` gives the smoothed responses of bernoulli_responses.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (design.q,):
        raise DimensionMismatchError(
            f"theta has length {theta.size}, design has {design.q} columns"
        )
    u = seed.random(design.n)
    mu = expit(design.X @ theta)
    return Dataset(design=design, y=bernoulli_responses(u, mu, bandwidth))


def simulate_glmm(
    design: GlmmDesign,
    theta: np.ndarray,
    seed: np.random.Generator,
    bandwidth: float = 0.0,
) -> Dataset:
    """Random-intercept logistic responses at packed ``theta``.

    The Bernoulli uniforms are drawn before the random effects so that a
    zero variance reproduces simulate_logistic on the pooled design.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (design.dim,):
        raise DimensionMismatchError(
            f"theta has length {theta.size}, expected {design.dim}"
        )
    if np.isnan(theta[-1]):
        raise InvalidParameterError("log sigma2 is NaN")
    beta0, beta, sigma2 = unpack_glmm_theta(theta)
    u = seed.random(design.n)
    effects = math.sqrt(sigma2) * seed.standard_normal(design.m)
    eta = beta0 + design.X @ beta + effects[design.cluster]
    return Dataset(design=design, y=bernoulli_responses(u, expit(eta), bandwidth))
