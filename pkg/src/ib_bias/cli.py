"""Command-line interface for the iterative bootstrap engine."""

import functools
import json
import logging
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from ib_bias.config import (
    RunConfig,
    RunManifest,
    SimSetting,
    default_output_dir,
    merge_overrides,
)
from ib_bias.data_loader import CsvDataLoader
from ib_bias.errors import (
    FailureBudgetExceeded,
    IBBiasError,
    InnerFailureBudgetExceeded,
    InvalidParameterError,
    NumericalError,
)
from ib_bias.ib.binding import ProblemBinding, binding_for, fit_estimator
from ib_bias.ib.engine import IBTrace, ib_run, two_step_ib
from ib_bias.models import Dataset, FitResult, GlmmDesign
from ib_bias.oracles import results_to_dicts, run_oracles
from ib_bias.service.export import export_intervals_csv, export_report, intervals_csv
from ib_bias.service.presets import get_preset, preset_names
from ib_bias.service.study import run_setting
from ib_bias.stats.inference import estimate_variance, normal_ci
from ib_bias.toys import VarianceToy, toy_binding, toy_estimate, toy_from_config

app = typer.Typer(help="Iterative bootstrap bias correction")
console = Console(stderr=True)
logger = logging.getLogger("ib_bias")

EXIT_USAGE = 1
EXIT_NOT_CONVERGED = 2
EXIT_BUDGET = 3

DEFAULT_EXPECTATIONS = "tests/fixtures/oracle_expectations.json"


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def handle_errors(command: Callable[..., None]) -> Callable[..., None]:
    """Map library exceptions to the documented exit codes."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            command(*args, **kwargs)
        except (ValidationError, ValueError) as exc:
            console.print(f"❌ {exc}", style="red")
            raise typer.Exit(EXIT_USAGE)
        except (FailureBudgetExceeded, InnerFailureBudgetExceeded) as exc:
            console.print(f"❌ {exc}", style="red")
            raise typer.Exit(EXIT_BUDGET)
        except NumericalError as exc:
            console.print(f"❌ {exc}", style="red")
            raise typer.Exit(EXIT_NOT_CONVERGED)
        except IBBiasError as exc:
            console.print(f"❌ {exc}", style="red")
            raise typer.Exit(EXIT_USAGE)

    return wrapper


def emit(document: Dict[str, Any]) -> None:
    """Results go to stdout as JSON."""
    typer.echo(json.dumps(document, indent=2, allow_nan=True))


def write_document(document: Dict[str, Any], manifest: RunManifest, name: str) -> None:
    out_dir = manifest.ensure_output_dir()
    if out_dir is None:
        return
    path = out_dir / f"{name}_seed{manifest.master_seed}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    logger.info("wrote %s", path)


class OutputFormat(str, Enum):
    JSON = "json"
    CSV = "csv"


def ib_overrides(
    H: Optional[int] = None,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
    damping: Optional[float] = None,
    fixed_seeds: Optional[bool] = None,
) -> Dict[str, Any]:
    """Command-line values for the ``ib`` section; ``None`` keeps the config."""
    return {
        "H": H,
        "max_iter": max_iter,
        "tol": tol,
        "damping": {"epsilon": damping},
        "fixed_seeds": fixed_seeds,
    }


def load_run(
    subcommand: str,
    config_path: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    out: Optional[str],
    ib: Optional[Dict[str, Any]] = None,
) -> Tuple[RunConfig, RunManifest]:
    overrides: Dict[str, Any] = {"seed": seed, "workers": workers, "ib": ib or {}}
    cfg = RunConfig.from_file(config_path, overrides)
    manifest = RunManifest(
        subcommand=subcommand,
        config_path=config_path,
        master_seed=cfg.seed,
        output_dir=out,
        workers=cfg.workers,
    )
    return cfg, manifest


def coordinate_names(cfg: RunConfig, dataset: Dataset, dim: int) -> List[str]:
    design = dataset.design
    if cfg.model in ("variance_toy", "linear_toy"):
        return [f"theta_{j + 1}" for j in range(dim)]
    slopes = [f"x_{j + 1}" for j in range(design.q)]
    if isinstance(design, GlmmDesign):
        return ["beta_0"] + slopes + ["log_sigma2"]
    if cfg.intercept:
        return ["intercept"] + [f"x_{j}" for j in range(1, design.q)]
    return slopes


def prepare(cfg: RunConfig, data: str) -> Tuple[Dataset, FitResult, ProblemBinding]:
    """Load the data, fit the initial estimator and build the IB binding."""
    loader = CsvDataLoader(data)
    if cfg.model == "variance_toy":
        y = loader.responses()
        toy = VarianceToy(n=y.size)
        dataset = Dataset(design=toy, y=y)
        return dataset, toy_estimate(dataset), toy_binding(toy)
    if cfg.model == "linear_toy":
        if cfg.toy is None:
            raise InvalidParameterError("linear_toy runs need a 'toy' section")
        linear = toy_from_config(cfg.toy)
        dataset = Dataset(design=linear, y=loader.responses())
        return dataset, toy_estimate(dataset), toy_binding(linear)

    model = "glmm" if cfg.model == "glmm" else "logistic"
    dataset = loader.to_dataset(model=model, intercept=cfg.intercept)
    binding = binding_for(dataset.design, cfg.estimator)
    return dataset, fit_estimator(dataset, cfg.estimator), binding


def run_ib(
    cfg: RunConfig, pi_obs: FitResult, binding: ProblemBinding, two_step: bool
) -> Tuple[np.ndarray, IBTrace]:
    if not pi_obs.finite:
        raise NumericalError(f"initial estimator is not finite {pi_obs.flags}")
    runner = two_step_ib if two_step else ib_run
    return runner(pi_obs.theta_hat, binding, cfg.ib, strict=False)


ConfigOption = typer.Option(None, "--config", "-c", help="JSON or TOML run configuration")
SeedOption = typer.Option(None, "--seed", help="Master seed")
HOption = typer.Option(None, "--H", help="Number of simulated samples per IB step")
WorkersOption = typer.Option(None, "--workers", help="Parallel workers")
OutOption = typer.Option(None, "--out", help="Also write the JSON document here")
MaxIterOption = typer.Option(None, "--max-iter", help="IB iteration cap")
TolOption = typer.Option(None, "--tol", help="Stop once the IB step norm is this small")
DampingOption = typer.Option(None, "--damping", help="IB step multiplier epsilon in (0, 1]")
FixedSeedsOption = typer.Option(
    None, "--fixed-seeds/--no-fixed-seeds", help="Reuse the same H seeds every iteration"
)
VerboseOption = typer.Option(False, "--verbose", "-v", help="Debug logging on stderr")


@app.command()
@handle_errors
def fit(
    data: str = typer.Argument(..., help="CSV with columns y, x_1..x_q[, cluster]"),
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
):
    """Fit the configured initial estimator."""
    configure_logging(verbose)
    cfg, manifest = load_run("fit", config, seed, None, out)
    dataset, result, _ = prepare(cfg, data)
    document = {
        "manifest": manifest.model_dump(),
        "coordinates": coordinate_names(cfg, dataset, result.theta_hat.size),
        "fit": result.to_dict(),
    }
    write_document(document, manifest, "fit")
    emit(document)
    if not result.converged:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command()
@handle_errors
def ib(
    data: str = typer.Argument(..., help="CSV with columns y, x_1..x_q[, cluster]"),
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    H: Optional[int] = HOption,
    workers: Optional[int] = WorkersOption,
    out: Optional[str] = OutOption,
    max_iter: Optional[int] = MaxIterOption,
    tol: Optional[float] = TolOption,
    damping: Optional[float] = DampingOption,
    fixed_seeds: Optional[bool] = FixedSeedsOption,
    two_step: bool = typer.Option(
        False, "--two-step", help="Re-run IB on the IB estimator"
    ),
    verbose: bool = VerboseOption,
):
    """Bias-correct the initial estimate by the iterative bootstrap."""
    configure_logging(verbose)
    ib_section = ib_overrides(H, max_iter, tol, damping, fixed_seeds)
    cfg, manifest = load_run("ib", config, seed, workers, out, ib_section)
    dataset, pi_obs, binding = prepare(cfg, data)
    theta, trace = run_ib(cfg, pi_obs, binding, two_step)
    document = {
        "manifest": manifest.model_dump(),
        "coordinates": coordinate_names(cfg, dataset, binding.dim),
        "pi_obs": pi_obs.to_dict(),
        "theta_hat": [float(v) for v in theta],
        "trace": trace.to_dict(),
    }
    write_document(document, manifest, "ib")
    emit(document)
    if not trace.converged:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command()
@handle_errors
def infer(
    data: str = typer.Argument(..., help="CSV with columns y, x_1..x_q[, cluster]"),
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    H: Optional[int] = HOption,
    workers: Optional[int] = WorkersOption,
    out: Optional[str] = OutOption,
    max_iter: Optional[int] = MaxIterOption,
    tol: Optional[float] = TolOption,
    damping: Optional[float] = DampingOption,
    fixed_seeds: Optional[bool] = FixedSeedsOption,
    theta_json: Optional[str] = typer.Option(
        None, "--from-ib", help="JSON document of a finished ib run"
    ),
    output_format: OutputFormat = typer.Option(
        OutputFormat.JSON, "--format", help="Print the JSON document or interval CSV rows"
    ),
    verbose: bool = VerboseOption,
):
    """IB estimate with sandwich covariance and normal confidence intervals."""
    configure_logging(verbose)
    ib_section = ib_overrides(H, max_iter, tol, damping, fixed_seeds)
    cfg, manifest = load_run("infer", config, seed, workers, out, ib_section)
    dataset, pi_obs, binding = prepare(cfg, data)

    trace: Optional[IBTrace] = None
    if theta_json is not None:
        with open(theta_json, "r", encoding="utf-8") as f:
            theta = np.asarray(json.load(f)["theta_hat"], dtype=float)
    else:
        theta, trace = run_ib(cfg, pi_obs, binding, two_step=False)
        if not trace.converged:
            raise NumericalError(f"IB did not converge in {trace.iterations} iterations")

    variance = estimate_variance(theta, binding, cfg.ib, cfg.inference, trace)
    names = coordinate_names(cfg, dataset, binding.dim)
    intervals = normal_ci(theta, variance.var_theta, cfg.inference.level, names)
    document = {
        "manifest": manifest.model_dump(),
        "theta_hat": [float(v) for v in theta],
        "variance": variance.to_dict(),
        "level": cfg.inference.level,
        "intervals": [
            {
                "coordinate": ci.coordinate,
                "estimate": ci.estimate,
                "se": ci.se,
                "lo": ci.lo,
                "hi": ci.hi,
                "flags": list(ci.flags),
            }
            for ci in intervals
        ],
    }
    write_document(document, manifest, "infer")
    out_dir = manifest.ensure_output_dir()
    if out_dir is not None:
        path = out_dir / f"infer_seed{manifest.master_seed}_intervals.csv"
        export_intervals_csv(intervals, str(path))
        logger.info("wrote %s", path)
    if output_format == OutputFormat.CSV:
        typer.echo(intervals_csv(intervals), nl=False)
    else:
        emit(document)


@app.command()
@handle_errors
def study(
    config: Optional[str] = ConfigOption,
    preset: Optional[str] = typer.Option(
        None, "--preset", help=f"Bundled setting: {', '.join(preset_names())}"
    ),
    seed: Optional[int] = SeedOption,
    H: Optional[int] = HOption,
    replicates: Optional[int] = typer.Option(None, "--replicates", "-R", help="Replicates"),
    workers: Optional[int] = WorkersOption,
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (IB_BIAS_OUT)"),
    verbose: bool = VerboseOption,
):
    """Run a Monte Carlo simulation study and write CSV + JSON reports."""
    configure_logging(verbose)
    if (config is None) == (preset is None):
        raise InvalidParameterError("give exactly one of --config or --preset")
    overrides = {"H": H, "replicates": replicates}
    if preset is not None:
        setting = SimSetting(**merge_overrides(get_preset(preset).model_dump(), overrides))
    else:
        setting = SimSetting.from_file(config, overrides)  # type: ignore[arg-type]
    out_dir = out or default_output_dir()
    run_cfg, manifest = load_run("study", None, seed, workers, out_dir)
    manifest = manifest.model_copy(update={"config_path": config})

    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeElapsedColumn(),
        console=console,
    ) as progress:
        task = progress.add_task(setting.name, total=setting.replicates)
        report = run_setting(
            setting,
            manifest.master_seed,
            n_jobs=run_cfg.workers,
            on_progress=lambda done: progress.advance(task, done),
        )

    manifest.ensure_output_dir()
    paths = export_report(report, out_dir, {"manifest": manifest.model_dump()})
    emit(
        {
            "manifest": manifest.model_dump(),
            "files": [str(path) for path in paths],
            "failures": report.failures,
            "budget_exceeded": report.budget_exceeded,
        }
    )
    if report.budget_exceeded:
        raise FailureBudgetExceeded(
            f"failure budget exceeded for {', '.join(report.budget_exceeded)}"
        )


@app.command()
@handle_errors
def oracle(
    regen: bool = typer.Option(False, "--regen", help="Rewrite stored expectations"),
    expectations: str = typer.Option(DEFAULT_EXPECTATIONS, help="Expectations JSON file"),
    verbose: bool = VerboseOption,
):
    """Check the engine against closed-form and independent-solver oracles."""
    configure_logging(verbose)
    results = run_oracles(Path(expectations), regen=regen)
    emit({"regen": regen, "results": results_to_dicts(results)})
    failed = [result.name for result in results if not result.passed]
    if failed:
        console.print(f"❌ oracles failed: {', '.join(failed)}", style="red")
        raise typer.Exit(EXIT_NOT_CONVERGED)
    console.print(f"✅ {len(results)} oracles passed", style="green")


def main() -> None:
    """Console entry point; click usage errors also exit with code 1."""
    try:
        code = app(standalone_mode=False)
    except click.exceptions.UsageError as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.Abort:
        sys.exit(EXIT_USAGE)
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
