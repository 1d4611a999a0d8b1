"""Seed-addressable random streams.

Every random draw in the package comes from a generator built by
``derive_seed(master, stream_id, h)``. The triple is hashed with SplitMix64
into four 64-bit words which seed a numpy ``SFC64`` bit generator, so a
stream is a pure function of its address and no global generator exists.
"""

from enum import IntEnum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class Stream(IntEnum):
    """Stream identifiers. OBSERVED is never used for simulations."""

    OBSERVED = 0
    IB_SIMULATION = 1
    REPLICATE = 2
    CONTAMINATION = 3
    COVARIATES = 4
    NESTED_IB = 5


def splitmix64_next(state: int) -> Tuple[int, int]:
    """Advance a SplitMix64 state; returns (new_state, output)."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def stream_key(master: int, stream_id: int, h: int) -> int:
    """64-bit key of stream (stream_id, h) under ``master``."""
    if master < 0 or stream_id < 0 or h < 0:
        raise ValueError("master, stream_id and h must be non-negative")
    _, key = splitmix64_next(master & MASK64)
    _, key = splitmix64_next(key ^ (stream_id & MASK64))
    _, key = splitmix64_next(key ^ (h & MASK64))
    return key


def stream_words(key: int, count: int = 4) -> List[int]:
    state = key
    words = []
    for _ in range(count):
        state, out = splitmix64_next(state)
        words.append(out)
    return words


def derive_seed(master: int, stream_id: int, h: int) -> np.random.Generator:
    """Fresh generator for stream (stream_id, h) of ``master``."""
    words = stream_words(stream_key(master, stream_id, h))
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence(words)))


class SeedSet(BaseModel):
    """Master seed plus H simulation seeds.

    ``generator(Stream.OBSERVED)`` realizes the observed-data draw and
    ``simulation(h)`` for h = 1..H the simulation draws.
    """

    model_config = ConfigDict(frozen=True)

    master: int = Field(default=0, ge=0, le=MASK64)
    h_max: int = Field(default=1, ge=1)

    def generator(self, stream_id: int, h: int = 0) -> np.random.Generator:
        return derive_seed(self.master, int(stream_id), h)

    def observed(self) -> np.random.Generator:
        return self.generator(Stream.OBSERVED, 0)

    def simulation(self, h: int) -> np.random.Generator:
        if h < 1:
            raise ValueError("simulation seeds are indexed from h = 1")
        return self.generator(Stream.IB_SIMULATION, h)

    def child(self, stream_id: int, h: int) -> "SeedSet":
        """SeedSet whose master is the key of (stream_id, h)."""
        return SeedSet(master=stream_key(self.master, int(stream_id), h), h_max=self.h_max)
