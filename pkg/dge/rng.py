# dge/rng.py
# Purpose: reproducible random streams keyed by (seed, stream id) and Gumbel sampling.

from __future__ import annotations

import numpy as np
from scipy import stats

from dge.tensor import Tensor

UNIFORM_CLAMP = 1e-9
_SEED_MASK = (1 << 64) - 1


class RngStream:
    """Identical (seed, stream) pairs replay identical draws; distinct streams are independent."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _SEED_MASK
        self.stream = int(stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        return stats.truncnorm.rvs(-bound, bound, scale=std, size=shape, random_state=self.generator)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_sample(rng: RngStream, shape) -> Tensor:
    """Standard Gumbel(0, 1) draws, g = -log(-log u); computed at 64-bit, cast to the engine precision."""
    return Tensor(gumbel_from_uniform(rng.uniform(shape)))
