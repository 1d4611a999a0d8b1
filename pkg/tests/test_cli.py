"""Tests for the command-line interface."""

import json

import numpy as np
import pandas as pd
import pytest
import typer
from typer.testing import CliRunner

from ib_bias.cli import EXIT_BUDGET, EXIT_NOT_CONVERGED, EXIT_USAGE, app, handle_errors
from ib_bias.errors import InnerFailureBudgetExceeded

runner = CliRunner(mix_stderr=False)


def write_config(tmp_path, data, name="run.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def variance_config(tmp_path) -> str:
    data = {"model": "variance_toy", "ib": {"analytic": True, "tol": 1e-12}}
    return write_config(tmp_path, data)


@pytest.fixture
def pseudo_config(tmp_path) -> str:
    return write_config(tmp_path, {"estimator": {"delta": 0.01}}, "pseudo.json")


class TestFit:
    def test_balanced_intercept(self, fixture_dir):
        result = runner.invoke(app, ["fit", str(fixture_dir / "intercept_balanced.csv")])
        assert result.exit_code == 0, result.stderr
        document = json.loads(result.stdout)
        assert document["coordinates"] == ["intercept"]
        assert document["fit"]["theta_hat"][0] == pytest.approx(0.0, abs=1e-10)
        assert document["manifest"]["subcommand"] == "fit"

    def test_bad_header(self, fixture_dir):
        result = runner.invoke(app, ["fit", str(fixture_dir / "bad_header.csv")])
        assert result.exit_code == EXIT_USAGE
        assert "x_1" in result.stderr

    def test_separation_exits_not_converged(self, fixture_dir):
        result = runner.invoke(app, ["fit", str(fixture_dir / "separation_complete.csv")])
        assert result.exit_code == EXIT_NOT_CONVERGED
        assert "separation" in json.loads(result.stdout)["fit"]["flags"]

    def test_out_directory(self, fixture_dir, tmp_path):
        out = tmp_path / "results"
        args = ["fit", str(fixture_dir / "logistic_n8.csv"), "--seed", "4", "--out", str(out)]
        result = runner.invoke(app, args)
        assert result.exit_code == 0
        assert (out / "fit_seed4.json").exists()


class TestIb:
    def test_variance_toy_analytic(self, fixture_dir, variance_config):
        data = fixture_dir / "variance_sample.csv"
        result = runner.invoke(app, ["ib", str(data), "--config", variance_config])
        assert result.exit_code == 0, result.stderr
        document = json.loads(result.stdout)
        y = np.loadtxt(data, skiprows=1)
        assert document["theta_hat"][0] == pytest.approx(np.var(y) * 10 / 9, rel=1e-10)
        assert document["trace"]["converged"]

    def test_single_simulation_smoke(self, fixture_dir, pseudo_config):
        data = str(fixture_dir / "logistic_n8.csv")
        args = ["ib", data, "-c", pseudo_config, "--H", "1", "--seed", "2"]
        result = runner.invoke(app, args)
        assert result.exit_code in (0, EXIT_NOT_CONVERGED)
        document = json.loads(result.stdout)
        assert len(document["theta_hat"]) == 2

    def test_deterministic_apart_from_timing(self, fixture_dir, pseudo_config):
        data = str(fixture_dir / "logistic_n8.csv")
        args = ["ib", data, "-c", pseudo_config, "--H", "20", "--seed", "7"]
        first = json.loads(runner.invoke(app, args).stdout)
        second = json.loads(runner.invoke(app, args).stdout)
        first["trace"].pop("wall_time")
        second["trace"].pop("wall_time")
        assert first == second

    def test_linear_toy_needs_section(self, fixture_dir, tmp_path):
        config = write_config(tmp_path, {"model": "linear_toy"})
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["ib", data, "--config", config])
        assert result.exit_code == EXIT_USAGE

    def test_max_iter_flag(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["ib", data, "-c", variance_config, "--max-iter", "1"])
        assert result.exit_code == EXIT_NOT_CONVERGED
        trace = json.loads(result.stdout)["trace"]
        assert len(trace["step_norms"]) == 1
        assert not trace["converged"]

    def test_damping_flag(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["ib", data, "-c", variance_config, "--damping", "0.5"])
        assert result.exit_code == 0, result.stderr
        trace = json.loads(result.stdout)["trace"]
        assert trace["converged"]
        assert set(trace["damping"]) == {0.5}

    def test_damping_out_of_range(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["ib", data, "-c", variance_config, "--damping", "0"])
        assert result.exit_code == EXIT_USAGE

    def test_tol_flag(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        tight = runner.invoke(app, ["ib", data, "-c", variance_config])
        loose = runner.invoke(app, ["ib", data, "-c", variance_config, "--tol", "1e-3"])
        assert loose.exit_code == 0, loose.stderr
        tight_steps = json.loads(tight.stdout)["trace"]["step_norms"]
        loose_steps = json.loads(loose.stdout)["trace"]["step_norms"]
        assert len(loose_steps) < len(tight_steps)
        assert loose_steps[-1] <= 1e-3

    def test_fixed_seeds_flag(self, fixture_dir, pseudo_config):
        data = str(fixture_dir / "logistic_n8.csv")
        base = ["ib", data, "-c", pseudo_config, "--H", "5", "--max-iter", "3", "--seed", "2"]
        fixed = runner.invoke(app, base + ["--fixed-seeds"])
        fresh = runner.invoke(app, base + ["--no-fixed-seeds"])
        assert fixed.exit_code in (0, EXIT_NOT_CONVERGED), fixed.stderr
        assert fresh.exit_code in (0, EXIT_NOT_CONVERGED), fresh.stderr
        fixed_iterates = json.loads(fixed.stdout)["trace"]["iterates"]
        fresh_iterates = json.loads(fresh.stdout)["trace"]["iterates"]
        assert fixed_iterates[:2] == fresh_iterates[:2]
        assert fixed_iterates[2:] != fresh_iterates[2:]

    def test_inner_failure_budget_exits_3(self, fixture_dir, tmp_path):
        config = write_config(tmp_path, {"ib": {"inner_failure_budget": 0.0}})
        data = str(fixture_dir / "logistic_n8.csv")
        result = runner.invoke(app, ["ib", data, "-c", config, "--H", "50", "--seed", "3"])
        assert result.exit_code == EXIT_BUDGET
        assert "inner fits failed" in result.stderr


class TestInfer:
    def test_variance_toy_interval(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["infer", data, "--config", variance_config])
        assert result.exit_code == 0, result.stderr
        document = json.loads(result.stdout)
        (interval,) = document["intervals"]
        assert interval["lo"] < document["theta_hat"][0] < interval["hi"]
        assert document["variance"]["H_used"] == 200

    def test_from_ib_document(self, fixture_dir, variance_config, tmp_path):
        data = str(fixture_dir / "variance_sample.csv")
        ib_doc = tmp_path / "ib.json"
        ib_doc.write_text(json.dumps({"theta_hat": [1.0]}))
        args = ["infer", data, "--config", variance_config, "--from-ib", str(ib_doc)]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.stderr
        assert json.loads(result.stdout)["theta_hat"] == [1.0]

    def test_csv_format(self, fixture_dir, variance_config):
        data = str(fixture_dir / "variance_sample.csv")
        result = runner.invoke(app, ["infer", data, "-c", variance_config, "--format", "csv"])
        assert result.exit_code == 0, result.stderr
        header, row = result.stdout.strip().split("\n")
        assert header == "coordinate,estimate,se,lo,hi"
        assert row.startswith("theta_1,")

    def test_out_writes_interval_rows(self, fixture_dir, variance_config, tmp_path):
        data = str(fixture_dir / "variance_sample.csv")
        args = ["infer", data, "-c", variance_config, "--seed", "5", "--out", str(tmp_path)]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.stderr
        frame = pd.read_csv(tmp_path / "infer_seed5_intervals.csv")
        assert list(frame.columns) == ["coordinate", "estimate", "se", "lo", "hi"]
        (interval,) = json.loads(result.stdout)["intervals"]
        assert frame.loc[0, "lo"] == pytest.approx(interval["lo"], rel=1e-15)
        assert (tmp_path / "infer_seed5.json").exists()


class TestStudy:
    def test_preset_dry_run(self, tmp_path):
        args = ["study", "--preset", "lrm_desk", "--replicates", "0", "--out", str(tmp_path)]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.stderr
        document = json.loads(result.stdout)
        assert len(document["files"]) == 3
        assert (tmp_path / "lrm_desk_seed0_summary.csv").exists()

    def test_needs_exactly_one_source(self, tmp_path):
        assert runner.invoke(app, ["study"]).exit_code == EXIT_USAGE
        config = write_config(tmp_path, {"q": 2, "n": 50})
        args = ["study", "--preset", "lrm_desk", "--config", config]
        assert runner.invoke(app, args).exit_code == EXIT_USAGE

    def test_unknown_preset(self):
        assert runner.invoke(app, ["study", "--preset", "nope"]).exit_code == EXIT_USAGE

    def test_config_file(self, tmp_path):
        config = write_config(
            tmp_path,
            {
                "name": "cfg",
                "q": 2,
                "n": 60,
                "H": 3,
                "replicates": 2,
                "beta_true": [0.5, -0.5],
                "estimators": ["MLE"],
            },
        )
        out = tmp_path / "out"
        result = runner.invoke(app, ["study", "--config", config, "--out", str(out), "--seed", "1"])
        assert result.exit_code == 0, result.stderr
        assert (out / "cfg_seed1_raw.csv").exists()


class TestOracle:
    def test_regenerate_then_check(self, tmp_path):
        expectations = str(tmp_path / "expectations.json")
        regen = runner.invoke(app, ["oracle", "--regen", "--expectations", expectations])
        assert regen.exit_code == 0, regen.stdout
        check = runner.invoke(app, ["oracle", "--expectations", expectations])
        assert check.exit_code == 0, check.stdout
        names = [r["name"] for r in json.loads(check.stdout)["results"]]
        assert "expect:logistic_mle_n8" in names


class TestExitCodes:
    def test_inner_failure_budget_maps_to_budget_code(self):
        @handle_errors
        def command():
            raise InnerFailureBudgetExceeded(3, 10, 0.1)

        with pytest.raises(typer.Exit) as excinfo:
            command()
        assert excinfo.value.exit_code == EXIT_BUDGET

    def test_missing_expectations_fail(self, tmp_path):
        missing = str(tmp_path / "absent.json")
        result = runner.invoke(app, ["oracle", "--expectations", missing])
        assert result.exit_code == EXIT_NOT_CONVERGED
        names = [r["name"] for r in json.loads(result.stdout)["results"]]
        assert "expect:file" in names
