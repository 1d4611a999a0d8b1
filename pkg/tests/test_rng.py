"""Tests for seed-addressable random streams."""

import numpy as np
import pytest

from ib_bias.models import LogisticDesign
from ib_bias.sim.rng import SeedSet, Stream, derive_seed, splitmix64_next, stream_key
from ib_bias.sim.simulate import simulate_logistic


class TestSplitMix64:
    def test_first_output_from_zero(self):
        _, out = splitmix64_next(0)
        assert out == 0xE220A8397B1DCDAF

    def test_outputs_are_64_bit(self):
        state = 12345
        for _ in range(100):
            state, out = splitmix64_next(state)
            assert 0 <= out < 2**64


class TestDeriveSeed:
    def test_same_address_same_draws(self):
        a = derive_seed(7, Stream.IB_SIMULATION, 3).standard_normal(5)
        b = derive_seed(7, Stream.IB_SIMULATION, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_addresses_are_distinct(self):
        draws = {
            (master, stream, h): derive_seed(master, stream, h).random()
            for master in (0, 1)
            for stream in (Stream.OBSERVED, Stream.IB_SIMULATION, Stream.REPLICATE)
            for h in (0, 1, 2)
        }
        assert len(set(draws.values())) == len(draws)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            stream_key(-1, 0, 0)


class TestSeedSet:
    def test_simulation_seeds_start_at_one(self):
        with pytest.raises(ValueError):
            SeedSet(master=1, h_max=3).simulation(0)

    def test_observed_differs_from_simulations(self):
        seeds = SeedSet(master=9, h_max=4)
        observed = seeds.observed().random()
        simulated = [seeds.simulation(h).random() for h in range(1, 5)]
        assert observed not in simulated

    def test_child_is_deterministic(self):
        seeds = SeedSet(master=3, h_max=2)
        assert seeds.child(Stream.NESTED_IB, 0) == seeds.child(Stream.NESTED_IB, 0)
        assert seeds.child(Stream.NESTED_IB, 0).master != seeds.master

    def test_streams_are_uncorrelated(self):
        design = LogisticDesign(np.ones((10_000, 1)))
        seeds = SeedSet(master=21, h_max=2)
        observed = simulate_logistic(design, np.zeros(1), seeds.observed()).y
        first = simulate_logistic(design, np.zeros(1), seeds.simulation(1)).y
        second = simulate_logistic(design, np.zeros(1), seeds.simulation(2)).y
        assert abs(np.corrcoef(first, second)[0, 1]) < 0.05
        assert abs(np.corrcoef(observed, first)[0, 1]) < 0.05
        assert first.mean() == pytest.approx(0.5, abs=0.015)
