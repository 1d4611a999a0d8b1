"""Analytic toy problems with closed-form binding functions."""

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ib_bias.config import ToyConfig
from ib_bias.errors import DimensionMismatchError, InvalidParameterError, SingularJacobianError
from ib_bias.ib.binding import ProblemBinding
from ib_bias.models import Dataset, FitResult


@dataclass(frozen=True)
class LinearBiasToy:
    """pi(theta, n) = (I + M + L / n^L_rate) theta + s + c / n, plus noise.

    ``noise_sd / sqrt(n)`` is the standard deviation of the Gaussian noise
    added by toy_simulate.
    """

    M: np.ndarray
    s: np.ndarray
    L: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    n: int = 10
    L_rate: float = 1.0
    noise_sd: float = 0.0
    contractive: bool = True

    def __post_init__(self) -> None:
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        p = M.shape[0]
        if M.shape != (p, p):
            raise DimensionMismatchError(f"M must be square, got {M.shape}")
        s = np.asarray(self.s, dtype=float).reshape(-1)
        L = np.zeros((p, p)) if self.L is None else np.atleast_2d(np.asarray(self.L, dtype=float))
        c = np.zeros(p) if self.c is None else np.asarray(self.c, dtype=float).reshape(-1)
        if s.shape != (p,) or L.shape != (p, p) or c.shape != (p,):
            raise DimensionMismatchError("s, L and c must match the dimension of M")
        if not all(np.all(np.isfinite(a)) for a in (M, s, L, c)):
            raise InvalidParameterError("toy coefficients must be finite")
        if self.n < 1 or self.noise_sd < 0:
            raise InvalidParameterError("need n >= 1 and noise_sd >= 0")
        if self.contractive and np.linalg.norm(M) >= 1.0:
            raise InvalidParameterError(
                f"contractive toy needs ||M||_F < 1, got {np.linalg.norm(M):.3g}"
            )
        for name, value in (("M", M), ("s", s), ("L", L), ("c", c)):
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return int(self.M.shape[0])

    def slope(self) -> np.ndarray:
        return np.eye(self.dim) + self.M + self.L / self.n**self.L_rate

    def offset(self) -> np.ndarray:
        return self.s + self.c / self.n


@dataclass(frozen=True)
class VarianceToy:
    """Divisor-n variance of n N(0, theta) draws; pi(theta, n) = theta (1 - 1/n)."""

    n: int = 10

    def __post_init__(self) -> None:
        if self.n < 2:
            raise InvalidParameterError(f"VarianceToy needs n >= 2, got {self.n}")

    @property
    def dim(self) -> int:
        return 1


Toy = Union[LinearBiasToy, VarianceToy]


def _at_n(toy: Toy, n: Optional[int]) -> Toy:
    return toy if n is None or n == toy.n else dataclasses.replace(toy, n=n)


def toy_binding_exact(toy: Toy, theta: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    """Deterministic binding function pi(theta, n)."""
    toy = _at_n(toy, n)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (toy.dim,):
        raise DimensionMismatchError(f"theta has length {theta.size}, toy has {toy.dim}")
    if isinstance(toy, VarianceToy):
        return theta * (1.0 - 1.0 / toy.n)
    return toy.slope() @ theta + toy.offset()


def toy_fixed_point_closed_form(
    toy: Toy, pi_obs: np.ndarray, n: Optional[int] = None
) -> np.ndarray:
    """Exact root of pi(theta, n) = pi_obs."""
    toy = _at_n(toy, n)
    pi_obs = np.asarray(pi_obs, dtype=float).reshape(-1)
    if isinstance(toy, VarianceToy):
        return pi_obs * toy.n / (toy.n - 1.0)
    try:
        return np.linalg.solve(toy.slope(), pi_obs - toy.offset())
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError("I + M + L_n is singular") from exc


def toy_sample(toy: Toy, theta: np.ndarray, seed: np.random.Generator) -> Dataset:
    """Raw simulated data: n normal draws, or the noisy linear estimate."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if isinstance(toy, VarianceToy):
        if not theta[0] > 0:
            raise InvalidParameterError(f"variance must be positive, got {theta[0]}")
        return Dataset(design=toy, y=math.sqrt(theta[0]) * seed.standard_normal(toy.n))
    noise = toy.noise_sd / math.sqrt(toy.n) * seed.standard_normal(toy.dim)
    return Dataset(design=toy, y=toy_binding_exact(toy, theta) + noise)


def toy_estimate(dataset: Dataset) -> FitResult:
    """Initial estimator of a toy sample."""
    toy = dataset.design
    if isinstance(toy, VarianceToy):
        value = np.array([np.var(dataset.y)])
        kind = "VarianceMLE"
    else:
        value = np.asarray(dataset.y, dtype=float)
        kind = "LinearToy"
    return FitResult(kind, value, True, 0, 0.0)


def toy_simulate(
    toy: Toy, theta: np.ndarray, n: Optional[int], seed: np.random.Generator
) -> np.ndarray:
    """One simulated initial estimate at theta."""
    return toy_estimate(toy_sample(_at_n(toy, n), theta, seed)).theta_hat


def toy_binding(toy: Toy) -> ProblemBinding:
    def simulate(theta: np.ndarray, seed: np.random.Generator) -> Dataset:
        return toy_sample(toy, theta, seed)

    def exact(theta: np.ndarray) -> np.ndarray:
        return toy_binding_exact(toy, theta)

    return ProblemBinding(
        simulate=simulate,
        fit=toy_estimate,
        dim=toy.dim,
        exact=exact,
        name=type(toy).__name__,
    )


def toy_from_config(config: ToyConfig) -> Toy:
    if config.kind == "variance":
        return VarianceToy(n=config.n)
    if config.M is None or config.s is None:
        raise InvalidParameterError("linear toy needs M and s")
    return LinearBiasToy(
        M=np.array(config.M),
        s=np.array(config.s),
        L=None if config.L is None else np.array(config.L),
        c=None if config.c is None else np.array(config.c),
        n=config.n,
        L_rate=config.L_rate,
        noise_sd=config.noise_sd,
        contractive=config.contractive,
    )
