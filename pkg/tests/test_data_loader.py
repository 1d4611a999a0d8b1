"""Tests for the CSV dataset loader."""

import numpy as np
import pytest

from ib_bias.data_loader import CsvDataLoader, load_csv_dataset
from ib_bias.errors import SchemaError
from ib_bias.models import GlmmDesign, LogisticDesign


class TestCsvDataLoader:
    def test_logistic_with_intercept(self, fixture_dir):
        dataset = load_csv_dataset(str(fixture_dir / "logistic_n8.csv"))
        assert isinstance(dataset.design, LogisticDesign)
        assert dataset.design.X.shape == (8, 2)
        np.testing.assert_array_equal(dataset.design.X[:, 0], np.ones(8))

    def test_logistic_without_intercept(self, fixture_dir):
        dataset = load_csv_dataset(str(fixture_dir / "logistic_n8.csv"), intercept=False)
        assert dataset.design.X.shape == (8, 1)

    def test_intercept_only(self, fixture_dir):
        dataset = load_csv_dataset(str(fixture_dir / "intercept_balanced.csv"))
        assert dataset.design.X.shape == (10, 1)
        assert dataset.y.sum() == 5

    def test_intercept_only_needs_intercept(self, fixture_dir):
        with pytest.raises(SchemaError):
            load_csv_dataset(str(fixture_dir / "intercept_balanced.csv"), intercept=False)

    def test_glmm_clusters_relabelled(self, fixture_dir):
        loader = CsvDataLoader(str(fixture_dir / "glmm_small.csv"))
        dataset = loader.to_dataset(model="glmm")
        assert isinstance(dataset.design, GlmmDesign)
        assert dataset.design.m == 4
        assert list(loader.cluster_labels) == ["a", "b", "c", "d"]
        np.testing.assert_array_equal(dataset.design.n_i, [4, 4, 4, 4])

    def test_missing_covariate_is_named(self, fixture_dir):
        with pytest.raises(SchemaError, match="x_1"):
            load_csv_dataset(str(fixture_dir / "bad_header.csv"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError):
            load_csv_dataset(str(tmp_path / "absent.csv"))

    def test_unexpected_column(self, tmp_path):
        path = tmp_path / "extra.csv"
        path.write_text("y,x_1,z\n0,1,2\n1,2,3\n")
        with pytest.raises(SchemaError, match="'z'"):
            load_csv_dataset(str(path))

    def test_missing_response(self, tmp_path):
        path = tmp_path / "no_y.csv"
        path.write_text("x_1\n0.5\n1.5\n")
        with pytest.raises(SchemaError, match="'y'"):
            load_csv_dataset(str(path))

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("y,x_1\n0,a\n1,b\n")
        with pytest.raises(SchemaError):
            load_csv_dataset(str(path))

    def test_missing_values(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text("y,x_1\n0,\n1,2\n")
        with pytest.raises(SchemaError, match="x_1"):
            load_csv_dataset(str(path))

    def test_glmm_needs_cluster(self, fixture_dir):
        with pytest.raises(SchemaError, match="cluster"):
            load_csv_dataset(str(fixture_dir / "logistic_n8.csv"), model="glmm")

    def test_responses_only(self, fixture_dir):
        y = CsvDataLoader(str(fixture_dir / "variance_sample.csv")).responses()
        assert y.shape == (10,)
