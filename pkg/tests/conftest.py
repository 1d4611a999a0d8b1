"""Shared fixtures."""

from pathlib import Path

import numpy as np
import pytest

from ib_bias.data_loader import load_csv_dataset
from ib_bias.models import GlmmDesign, LogisticDesign
from ib_bias.sim.rng import SeedSet, Stream
from ib_bias.sim.simulate import draw_covariates

FIXTURES = Path(__file__).parent / "fixtures"

SEPARATION_CORPUS = [
    "separation_complete.csv",
    "separation_quasi.csv",
    "separation_two_covariates.csv",
]


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture
def logistic_n8():
    return load_csv_dataset(str(FIXTURES / "logistic_n8.csv"))


@pytest.fixture
def robust_n20():
    return load_csv_dataset(str(FIXTURES / "robust_n20.csv"))


@pytest.fixture(params=SEPARATION_CORPUS)
def separated(request):
    return load_csv_dataset(str(FIXTURES / request.param))


@pytest.fixture
def small_logistic_design() -> LogisticDesign:
    gen = SeedSet(master=42).generator(Stream.COVARIATES)
    X = draw_covariates(120, 3, 0.0, 1.0, gen)
    return LogisticDesign(X)


@pytest.fixture
def small_glmm_design() -> GlmmDesign:
    gen = SeedSet(master=43).generator(Stream.COVARIATES)
    X = draw_covariates(80, 2, 0.0, 1.0, gen)
    return GlmmDesign(X, np.repeat(np.arange(10), 8))
