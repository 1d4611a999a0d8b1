"""Seeded data generation."""

from ib_bias.sim.rng import SeedSet, Stream, derive_seed
from ib_bias.sim.simulate import (
    draw_covariates,
    pack_glmm_theta,
    simulate_glmm,
    simulate_logistic,
    unpack_glmm_theta,
)

__all__ = [
    "SeedSet",
    "Stream",
    "derive_seed",
    "draw_covariates",
    "pack_glmm_theta",
    "simulate_glmm",
    "simulate_logistic",
    "unpack_glmm_theta",
]
