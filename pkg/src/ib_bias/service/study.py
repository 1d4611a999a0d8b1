"""Monte Carlo simulation study: data generation, estimator bank, report."""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import joblib
import numpy as np
import pandas as pd
from numpy.polynomial.hermite import hermgauss
from scipy.special import expit

from ib_bias.config import EstimatorSpec, IBConfig, SimSetting
from ib_bias.errors import IBBiasError, InvalidParameterError
from ib_bias.ib.binding import glmm_binding, logistic_binding
from ib_bias.ib.engine import ib_run
from ib_bias.models import EstimatorKind, FitResult, GlmmDesign, LogisticDesign
from ib_bias.sim.rng import SeedSet, Stream, stream_key
from ib_bias.sim.simulate import draw_covariates, pack_glmm_theta, simulate_glmm, simulate_logistic
from ib_bias.stats.glmm import glmm_ghq, glmm_pirls
from ib_bias.stats.logistic import logistic_firth, logistic_irls, pseudo_values
from ib_bias.stats.robust import robust_m_estimator
from ib_bias.stats.summary import RAW_COLUMNS, REPORT_COLUMNS, summarize

logger = logging.getLogger(__name__)

EPV_TOLERANCE = 0.20


@dataclass
class ContaminationResult:
    """Contaminated responses and the indices that changed."""

    y: np.ndarray
    flipped: np.ndarray
    shortfall: bool = False


@dataclass
class ReplicateOutcome:
    replicate: int
    estimates: Dict[str, Optional[np.ndarray]]
    flags: Dict[str, Tuple[str, ...]]
    shortfall: bool = False


@dataclass
class MCReport:
    """Aggregated Monte Carlo results of one setting."""

    setting: SimSetting
    master_seed: int
    summary: pd.DataFrame
    raw: pd.DataFrame
    failures: Dict[str, int]
    budget_exceeded: List[str] = field(default_factory=list)
    flag_counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    contamination_shortfalls: int = 0
    wall_time: float = 0.0

    def metadata(self) -> Dict[str, Any]:
        return {
            "setting": self.setting.model_dump(mode="json"),
            "master_seed": int(self.master_seed),
            "replicates": int(self.setting.replicates),
            "failures": dict(self.failures),
            "budget_exceeded": list(self.budget_exceeded),
            "flag_counts": self.flag_counts,
            "contamination_shortfalls": int(self.contamination_shortfalls),
            "wall_time": float(self.wall_time),
        }


def contaminate(
    y: np.ndarray,
    mu_hat: np.ndarray,
    rate: float,
    gen: Optional[np.random.Generator] = None,
    mode: str = "extreme",
) -> ContaminationResult:
    """Misclassify about ``2 * round(rate * n)`` responses.

    ``extreme`` swaps the k ones with the largest fitted probability with
    the k zeros with the smallest. ``random`` flips 2k uniformly chosen
    responses drawn from ``gen``.
    """
    if not 0.0 <= rate < 0.5:
        raise InvalidParameterError(f"contamination rate must lie in [0, 0.5), got {rate}")
    y = np.asarray(y, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    n = y.size
    k = int(math.floor(rate * n + 0.5))
    if k == 0:
        return ContaminationResult(y=y.copy(), flipped=np.empty(0, dtype=int))

    if mode == "random":
        if gen is None:
            raise InvalidParameterError("random contamination needs a generator")
        flipped = np.sort(gen.choice(n, size=min(2 * k, n), replace=False))
        out = y.copy()
        out[flipped] = 1.0 - out[flipped]
        return ContaminationResult(y=out, flipped=flipped, shortfall=2 * k > n)
    if mode != "extreme":
        raise InvalidParameterError(f"unknown contamination mode {mode!r}")

    ones = np.flatnonzero(y == 1)
    zeros = np.flatnonzero(y == 0)
    top_ones = ones[np.argsort(-mu_hat[ones], kind="stable")]
    bottom_zeros = zeros[np.argsort(mu_hat[zeros], kind="stable")]
    swaps = min(k, top_ones.size, bottom_zeros.size)
    flipped = np.sort(np.concatenate([top_ones[:swaps], bottom_zeros[:swaps]]))
    out = y.copy()
    out[flipped] = 1.0 - out[flipped]
    return ContaminationResult(y=out, flipped=flipped, shortfall=swaps < k)


def replicate_seeds(master_seed: int, replicate: int, H: int) -> SeedSet:
    """Seeds of one replicate; independent of every other replicate."""
    return SeedSet(master=stream_key(master_seed, Stream.REPLICATE, replicate), h_max=H)


def draw_design(setting: SimSetting, seeds: SeedSet) -> Any:
    gen = seeds.generator(Stream.COVARIATES)
    X = draw_covariates(setting.n_total, setting.q, setting.covariate_mean, setting.sd, gen)
    if setting.model == "LRM":
        return LogisticDesign(X)
    cluster = np.repeat(np.arange(int(setting.m)), int(setting.n_i))  # type: ignore[arg-type]
    return GlmmDesign(X, cluster, m=setting.m)


def true_theta(setting: SimSetting) -> np.ndarray:
    """Generating parameter on the packed (log variance) scale."""
    beta = np.asarray(setting.beta, dtype=float)
    if setting.model == "LRM":
        return beta
    return pack_glmm_theta(setting.intercept_true, beta, setting.sigma2_true)


def nominal_epv(setting: SimSetting, master_seed: int = 0) -> float:
    """Expected EPV under the generating model with replicate-0 covariates."""
    design = draw_design(setting, replicate_seeds(master_seed, 0, setting.H))
    beta = np.asarray(setting.beta, dtype=float)
    if setting.model == "LRM":
        mu = expit(design.X @ beta)
    else:
        eta = setting.intercept_true + design.X @ beta
        z, w = hermgauss(40)
        shift = math.sqrt(2.0 * setting.sigma2_true) * z
        mu = expit(eta[:, np.newaxis] + shift) @ w / math.sqrt(math.pi)
    events = float(np.sum(mu))
    return min(events, setting.n_total - events) / setting.q


def check_faithful(setting: SimSetting, master_seed: int = 0) -> Optional[float]:
    """Nominal EPV of a faithful setting; raises when it drifts over 20%."""
    if not setting.faithful or setting.source_epv is None:
        return None
    value = nominal_epv(setting, master_seed)
    if abs(value - setting.source_epv) > EPV_TOLERANCE * setting.source_epv:
        raise InvalidParameterError(
            f"{setting.name}: nominal EPV {value:.2f} is not within 20% "
            f"of the source EPV {setting.source_epv}"
        )
    return value


def _ib_config(setting: SimSetting, seeds: SeedSet) -> IBConfig:
    return IBConfig(
        H=setting.H,
        max_iter=setting.ib_max_iter,
        tol=setting.ib_tol,
        damping=setting.damping,
        seed_set=seeds,
        n_jobs=1,
    )


def _accept(result: FitResult) -> Optional[np.ndarray]:
    if result.converged and result.finite:
        return np.asarray(result.theta_hat, dtype=float)
    return None


def _run_ib(
    pi_obs: FitResult, binding: Any, cfg: IBConfig
) -> Tuple[Optional[np.ndarray], Tuple[str, ...]]:
    if not pi_obs.finite:
        return None, ("initial_failed",)
    try:
        theta, trace = ib_run(pi_obs.theta_hat, binding, cfg, strict=False)
    except IBBiasError as exc:
        logger.debug("IB failed: %s", exc)
        return None, (type(exc).__name__,)
    flags: Tuple[str, ...] = () if trace.converged else ("not_converged",)
    if trace.clamped:
        flags += ("clamped",)
    return (theta if trace.converged else None), flags


def _lrm_bank(
    setting: SimSetting, design: LogisticDesign, y: np.ndarray, seeds: SeedSet
) -> Tuple[Dict[str, Optional[np.ndarray]], Dict[str, Tuple[str, ...]]]:
    names = setting.estimator_names
    estimates: Dict[str, Optional[np.ndarray]] = {}
    flags: Dict[str, Tuple[str, ...]] = {}
    y_pseudo = pseudo_values(y, setting.delta)
    cfg = _ib_config(setting, seeds)

    def direct(name: str, fit: Callable[[], FitResult]) -> None:
        if name not in names:
            return
        result = fit()
        estimates[name] = _accept(result)
        flags[name] = result.flags

    direct("MLE", lambda: logistic_irls(design, y))
    direct("MLE-BR", lambda: logistic_firth(design, y))
    direct(
        "ROB",
        lambda: robust_m_estimator(
            design,
            y,
            EstimatorSpec(kind=EstimatorKind.LOGISTIC_ROBUST, huber_c=setting.huber_c),
        ),
    )
    for name, kind, estimator in (
        ("IB-MLE", EstimatorKind.LOGISTIC_MLE, logistic_irls),
        ("IB-ROB", EstimatorKind.LOGISTIC_ROBUST, robust_m_estimator),
    ):
        if name not in names:
            continue
        spec = EstimatorSpec(kind=kind, delta=setting.delta, huber_c=setting.huber_c)
        pi_obs = estimator(design, y_pseudo, spec)
        estimates[name], flags[name] = _run_ib(pi_obs, logistic_binding(design, spec), cfg)
    return estimates, flags


def _natural_scale(theta: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if theta is None:
        return None
    out = np.array(theta, dtype=float)
    out[-1] = math.exp(out[-1])
    return out


def _glmm_bank(
    setting: SimSetting, design: GlmmDesign, y: np.ndarray, seeds: SeedSet
) -> Tuple[Dict[str, Optional[np.ndarray]], Dict[str, Tuple[str, ...]]]:
    names = setting.estimator_names
    estimates: Dict[str, Optional[np.ndarray]] = {}
    flags: Dict[str, Tuple[str, ...]] = {}
    spec = EstimatorSpec(kind=EstimatorKind.GLMM_PIRLS, delta=setting.delta)
    y_pseudo = pseudo_values(y, setting.delta)
    pirls = glmm_pirls(design, y_pseudo, spec)

    if "PIRLS" in names:
        estimates["PIRLS"] = _natural_scale(_accept(pirls))
        flags["PIRLS"] = pirls.flags
    if "GHQ" in names:
        try:
            ghq = glmm_ghq(
                design,
                y,
                EstimatorSpec(kind=EstimatorKind.GLMM_GHQ, ghq_nodes=setting.ghq_nodes),
            )
            estimates["GHQ"] = _natural_scale(_accept(ghq))
            flags["GHQ"] = ghq.flags
        except IBBiasError as exc:
            estimates["GHQ"], flags["GHQ"] = None, (type(exc).__name__,)
    if "IB" in names:
        theta, ib_flags = _run_ib(
            pirls, glmm_binding(design, spec), _ib_config(setting, seeds)
        )
        estimates["IB"], flags["IB"] = _natural_scale(theta), ib_flags
    return estimates, flags


def run_replicate(setting: SimSetting, master_seed: int, replicate: int) -> ReplicateOutcome:
    """One replicate; a pure function of (setting, master_seed, replicate)."""
    seeds = replicate_seeds(master_seed, replicate, setting.H)
    names = setting.estimator_names
    try:
        design = draw_design(setting, seeds)
    except IBBiasError as exc:
        logger.warning("replicate %d: design rejected (%s)", replicate, exc)
        return ReplicateOutcome(
            replicate,
            {name: None for name in names},
            {name: ("design_rejected",) for name in names},
        )

    theta0 = true_theta(setting)
    if setting.model == "LRM":
        y = simulate_logistic(design, theta0, seeds.observed()).y
        pooled_design = design
    else:
        y = simulate_glmm(design, theta0, seeds.observed()).y
        pooled_design = design.pooled()

    shortfall = False
    if setting.contamination_rate > 0:
        fitted = logistic_irls(pooled_design, pseudo_values(y, setting.delta))
        mu_hat = expit(pooled_design.X @ fitted.theta_hat)
        contaminated = contaminate(
            y,
            mu_hat,
            setting.contamination_rate,
            seeds.generator(Stream.CONTAMINATION),
            setting.contamination_mode,
        )
        y, shortfall = contaminated.y, contaminated.shortfall

    if setting.model == "LRM":
        estimates, flags = _lrm_bank(setting, design, y, seeds)
    else:
        estimates, flags = _glmm_bank(setting, design, y, seeds)
    return ReplicateOutcome(replicate, estimates, flags, shortfall)


def _raw_rows(setting: SimSetting, outcome: ReplicateOutcome) -> List[Dict[str, Any]]:
    coordinates = setting.coordinate_names()
    rows = []
    for name in setting.estimator_names:
        theta = outcome.estimates.get(name)
        for j, coordinate in enumerate(coordinates):
            value = float(theta[j]) if theta is not None else math.nan
            rows.append(
                {
                    "replicate": outcome.replicate,
                    "estimator": name,
                    "coordinate": coordinate,
                    "value": value,
                }
            )
    return rows


def run_setting(
    setting: SimSetting,
    master_seed: int,
    n_jobs: int = 1,
    on_progress: Optional[Callable[[int], None]] = None,
    replicates: Optional[List[int]] = None,
) -> MCReport:
    """Run every replicate of ``setting`` and aggregate the estimator bank.

    Replicates are processed in chunks in index order so the report does not
    depend on ``n_jobs``. ``on_progress`` receives the number of replicates
    finished in each chunk.
    """
    started = time.perf_counter()
    check_faithful(setting, master_seed)
    indices = list(range(setting.replicates)) if replicates is None else list(replicates)
    chunk = max(1, n_jobs) * 4
    outcomes: List[ReplicateOutcome] = []
    for start in range(0, len(indices), chunk):
        batch = indices[start : start + chunk]
        if n_jobs == 1:
            done = [run_replicate(setting, master_seed, r) for r in batch]
        else:
            done = joblib.Parallel(n_jobs=n_jobs)(
                joblib.delayed(run_replicate)(setting, master_seed, r) for r in batch
            )
        outcomes.extend(done)
        if on_progress is not None:
            on_progress(len(batch))

    rows = [row for outcome in outcomes for row in _raw_rows(setting, outcome)]
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    truth = dict(zip(setting.coordinate_names(), setting.truth()))
    summary = summarize(raw, truth, strict=False) if rows else pd.DataFrame(columns=REPORT_COLUMNS)

    failures = {
        name: sum(1 for o in outcomes if o.estimates.get(name) is None)
        for name in setting.estimator_names
    }
    budget_exceeded = [
        name
        for name, count in failures.items()
        if outcomes and count > setting.failure_budget * len(outcomes)
    ]
    flag_counts: Dict[str, Dict[str, int]] = {}
    for outcome in outcomes:
        for name, fit_flags in outcome.flags.items():
            for flag in fit_flags:
                counts = flag_counts.setdefault(name, {})
                counts[flag] = counts.get(flag, 0) + 1
    if budget_exceeded:
        logger.warning("failure budget exceeded for %s", ", ".join(budget_exceeded))

    return MCReport(
        setting=setting,
        master_seed=master_seed,
        summary=summary,
        raw=raw,
        failures=failures,
        budget_exceeded=budget_exceeded,
        flag_counts=flag_counts,
        contamination_shortfalls=sum(1 for o in outcomes if o.shortfall),
        wall_time=time.perf_counter() - started,
    )


class StudyRunner:
    """Runs a list of settings with one master seed."""

    def __init__(self, master_seed: int, n_jobs: int = 1):
        self.master_seed = master_seed
        self.n_jobs = n_jobs
        self.reports: List[MCReport] = []

    def run(
        self,
        settings: List[SimSetting],
        on_progress: Optional[Callable[[int], None]] = None,
    ) -> List[MCReport]:
        for setting in settings:
            logger.info(
                "running %s: %d replicates, H=%d", setting.name, setting.replicates, setting.H
            )
            report = run_setting(setting, self.master_seed, self.n_jobs, on_progress)
            self.reports.append(report)
        return self.reports
