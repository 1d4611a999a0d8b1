"""Configuration management for the IB bias-correction engine."""

import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ib_bias import FORMAT_VERSION
from ib_bias.errors import InvalidParameterError
from ib_bias.models import EstimatorKind
from ib_bias.sim.rng import SeedSet

# Load environment variables
load_dotenv()

LRM_ESTIMATORS = ("MLE", "MLE-BR", "IB-MLE", "ROB", "IB-ROB")
GLMM_ESTIMATORS = ("PIRLS", "GHQ", "IB")


class IrlsControl(BaseModel):
    """Newton/IRLS stopping controls shared by all estimators."""

    tol: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=100, ge=1)
    max_halvings: int = Field(default=20, ge=0)


class EstimatorSpec(BaseModel):
    """Configuration of one initial or comparison estimator."""

    kind: EstimatorKind = Field(default=EstimatorKind.LOGISTIC_MLE)
    delta: float = Field(default=0.0, ge=0, lt=0.5, description="pseudo-value shift")
    huber_c: float = Field(default=1.345, gt=0)
    x_weights: Literal["leverage", "none"] = Field(default="leverage")
    ghq_nodes: int = Field(default=15, ge=1)
    irls: IrlsControl = Field(default_factory=IrlsControl)


class DampingSchedule(BaseModel):
    """Step multipliers eps_k in (0, 1] for the damped IB sequence."""

    kind: Literal["constant", "geometric"] = Field(default="constant")
    epsilon: float = Field(default=1.0, gt=0, le=1)
    rho: float = Field(default=0.9, gt=0, le=1)
    epsilon_min: float = Field(default=0.1, gt=0, le=1)

    def at(self, k: int) -> float:
        """eps_k for iteration k >= 1."""
        if self.kind == "constant":
            return self.epsilon
        return max(self.epsilon_min, self.epsilon * self.rho**k)


class IBConfig(BaseModel):
    """Iterative bootstrap controls."""

    H: int = Field(default=100, ge=1)
    max_iter: int = Field(default=200, ge=1)
    tol: Optional[float] = Field(default=None, gt=0)
    damping: DampingSchedule = Field(default_factory=DampingSchedule)
    seed_set: SeedSet = Field(default_factory=SeedSet)
    fixed_seeds: bool = Field(default=True)
    analytic: bool = Field(default=False, description="use the exact binding (H = inf)")
    inner_failure_budget: float = Field(default=0.10, ge=0, le=1)
    rescue: bool = Field(default=True)
    n_jobs: int = Field(default=1)

    @model_validator(mode="after")
    def sync_seed_count(self) -> "IBConfig":
        if self.seed_set.h_max != self.H:
            object.__setattr__(
                self, "seed_set", SeedSet(master=self.seed_set.master, h_max=self.H)
            )
        return self

    def tolerance(self, p: int) -> float:
        """Step-norm threshold; defaults to 1e-6 * sqrt(p)."""
        if self.tol is not None:
            return self.tol
        return 1e-6 * math.sqrt(p)


class InferenceConfig(BaseModel):
    """Variance estimation controls."""

    H_var: Optional[int] = Field(default=None, ge=2)
    jacobian_step: Optional[float] = Field(default=None, gt=0)
    level: float = Field(default=0.95, gt=0, lt=1)
    reuse_last_fits: bool = Field(default=True)

    def resolved_H_var(self, H: int) -> int:
        return self.H_var if self.H_var is not None else max(H, 200)


class ToyConfig(BaseModel):
    """Analytic toy problem definition."""

    kind: Literal["linear", "variance"] = Field(default="variance")
    n: int = Field(default=10, ge=2)
    M: Optional[List[List[float]]] = Field(default=None)
    s: Optional[List[float]] = Field(default=None)
    L: Optional[List[List[float]]] = Field(default=None)
    L_rate: float = Field(default=1.0, gt=0)
    c: Optional[List[float]] = Field(default=None)
    noise_sd: float = Field(default=0.0, ge=0)
    contractive: bool = Field(default=True)


class RunConfig(BaseModel):
    """Configuration for the fit, ib and infer commands."""

    model: Literal["logistic", "glmm", "variance_toy", "linear_toy"] = Field(
        default="logistic"
    )
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    ib: IBConfig = Field(default_factory=IBConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    toy: Optional[ToyConfig] = Field(default=None)
    intercept: bool = Field(default=True, description="prepend a column of ones to logistic designs")
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def propagate_seed(self) -> "RunConfig":
        ib = self.ib.model_copy(
            update={
                "seed_set": SeedSet(master=self.seed, h_max=self.ib.H),
                "n_jobs": self.workers,
            }
        )
        object.__setattr__(self, "ib", ib)
        return self

    @classmethod
    def from_file(
        cls, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
    ) -> "RunConfig":
        """Load configuration from a JSON or TOML file.

        Precedence: ``overrides`` (CLI flags), then IB_BIAS_* variables, then
        the file, then field defaults.
        """
        data = apply_env_overrides(load_config_data(config_path))
        return cls(**merge_overrides(data, overrides or {}))


class SimSetting(BaseModel):
    """One Monte Carlo simulation setting."""

    model_config = ConfigDict(populate_by_name=True)

    name: str = Field(default="custom")
    model: Literal["LRM", "LRM_RandomIntercept"] = Field(default="LRM")
    q: int = Field(default=20, ge=1, description="slope covariates")
    n: Optional[int] = Field(default=None, ge=2)
    m: Optional[int] = Field(default=None, ge=1)
    n_i: Optional[int] = Field(default=None, ge=1)
    H: int = Field(default=100, ge=1)
    beta_true: Optional[List[float]] = Field(default=None)
    intercept_true: float = Field(default=0.0)
    sigma2_true: float = Field(default=1.5, ge=0)
    delta: float = Field(default=0.01, ge=0, lt=0.5)
    covariate_mean: float = Field(default=0.0)
    covariate_sd: Optional[float] = Field(default=None, gt=0)
    contamination_rate: float = Field(default=0.0, ge=0, lt=0.5)
    contamination_mode: Literal["extreme", "random"] = Field(default="extreme")
    replicates: int = Field(default=200, ge=0)
    estimators: Optional[List[str]] = Field(default=None)
    huber_c: float = Field(default=1.345, gt=0)
    ghq_nodes: int = Field(default=15, ge=1)
    ib_max_iter: int = Field(default=200, ge=1)
    ib_tol: Optional[float] = Field(default=None, gt=0)
    damping: DampingSchedule = Field(default_factory=DampingSchedule)
    failure_budget: float = Field(default=0.20, ge=0, le=1)
    faithful: bool = Field(default=False)
    source_epv: Optional[float] = Field(default=None, gt=0)

    @field_validator("estimators")
    @classmethod
    def validate_estimators(cls, v: Optional[List[str]]) -> Optional[List[str]]:
        if v is None:
            return v
        known = set(LRM_ESTIMATORS) | set(GLMM_ESTIMATORS)
        unknown = [name for name in v if name not in known]
        if unknown:
            raise ValueError(f"unknown estimators: {unknown}")
        return v

    @model_validator(mode="after")
    def validate_dimensions(self) -> "SimSetting":
        if self.model == "LRM":
            if self.n is None:
                raise ValueError("LRM settings need n")
            allowed = LRM_ESTIMATORS
        else:
            if self.m is None or self.n_i is None:
                raise ValueError("random-intercept settings need m and n_i")
            allowed = GLMM_ESTIMATORS
        if self.estimators is not None:
            wrong = [name for name in self.estimators if name not in allowed]
            if wrong:
                raise ValueError(f"estimators {wrong} do not apply to {self.model}")
        if self.beta_true is not None and len(self.beta_true) != self.q:
            raise ValueError(
                f"beta_true has {len(self.beta_true)} entries, expected q={self.q}"
            )
        if self.faithful:
            if self.q < 4 or list(self.beta) != table_beta_pattern(self.q):
                raise ValueError("faithful settings keep the (5, 5, -7, -7, 0, ...) pattern")
            if self.covariate_sd is not None and not math.isclose(
                self.covariate_sd, covariate_sd_rule(self.n_total)
            ):
                raise ValueError("faithful settings keep covariate variance 4/sqrt(n)")
        return self

    @property
    def n_total(self) -> int:
        if self.model == "LRM":
            return int(self.n)  # type: ignore[arg-type]
        return int(self.m) * int(self.n_i)  # type: ignore[operator]

    @property
    def beta(self) -> List[float]:
        if self.beta_true is not None:
            return list(self.beta_true)
        return table_beta_pattern(self.q)

    @property
    def sd(self) -> float:
        if self.covariate_sd is not None:
            return self.covariate_sd
        return covariate_sd_rule(self.n_total)

    @property
    def estimator_names(self) -> List[str]:
        if self.estimators is not None:
            return list(self.estimators)
        return list(LRM_ESTIMATORS if self.model == "LRM" else GLMM_ESTIMATORS)

    def coordinate_names(self) -> List[str]:
        slopes = [f"beta_{j}" for j in range(1, self.q + 1)]
        if self.model == "LRM":
            return slopes
        return ["beta_0"] + slopes + ["sigma2"]

    def truth(self) -> List[float]:
        """True values on the reporting scale (variance, not log variance)."""
        if self.model == "LRM":
            return self.beta
        return [self.intercept_true] + self.beta + [self.sigma2_true]

    @classmethod
    def from_file(
        cls, config_path: str, overrides: Optional[Dict[str, Any]] = None
    ) -> "SimSetting":
        return cls(**merge_overrides(load_config_data(config_path), overrides or {}))


def table_beta_pattern(q: int) -> List[float]:
    """(5, 5, -7, -7, 0, ..., 0) truncated or padded to length q."""
    head = [5.0, 5.0, -7.0, -7.0]
    return (head + [0.0] * max(0, q - 4))[:q]


def load_config_data(config_path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON or TOML mapping; a missing or absent file gives {}."""
    if config_path is None:
        return {}
    config_file = Path(config_path)
    if not config_file.exists():
        return {}
    with open(config_file, "r", encoding="utf-8") as f:
        if config_file.suffix.lower() == ".json":
            return json.load(f)
        return toml.load(f)


def apply_env_overrides(data: Dict[str, Any]) -> Dict[str, Any]:
    """Fill seed and worker count from IB_BIAS_* variables when unset."""
    merged = dict(data)
    env_seed = os.getenv("IB_BIAS_SEED")
    env_workers = os.getenv("IB_BIAS_WORKERS")
    if env_seed is not None and "seed" not in merged:
        merged["seed"] = int(env_seed)
    if env_workers is not None and "workers" not in merged:
        merged["workers"] = int(env_workers)
    return merged


def default_output_dir() -> str:
    return os.getenv("IB_BIAS_OUT", "results")


def covariate_sd_rule(n: int) -> float:
    """Standard deviation of covariates whose variance is 4/sqrt(n)."""
    return math.sqrt(4.0 / math.sqrt(n))


def merge_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive merge; ``None`` override values leave the data untouched."""
    merged = dict(data)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            base = merged.get(key)
            nested = merge_overrides(base if isinstance(base, dict) else {}, value)
            if nested:
                merged[key] = nested
        else:
            merged[key] = value
    return merged


class RunManifest(BaseModel):
    """What a CLI invocation ran with; echoed into every output document."""

    subcommand: str
    config_path: Optional[str] = None
    master_seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = None
    workers: int = Field(default=1, ge=1)
    format_version: str = Field(default=FORMAT_VERSION)

    @field_validator("format_version")
    @classmethod
    def validate_format_version(cls, v: str) -> str:
        if v != FORMAT_VERSION:
            raise ValueError(f"format version {v} does not match {FORMAT_VERSION}")
        return v

    def ensure_output_dir(self) -> Optional[Path]:
        """Create the output directory; raises when it is not writable."""
        if self.output_dir is None:
            return None
        path = Path(self.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        if not os.access(path, os.W_OK):
            raise InvalidParameterError(f"output directory {path} is not writable")
        return path
