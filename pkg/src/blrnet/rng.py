"""Seeded random stream with a documented draw order.

One RngStream is consumed sequentially per training run / forward pass:
per layer, the order is (1) pooling noise, (2) Concrete noise. Identical
seed plus identical op sequence reproduces identical samples.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self) -> "RngStream":
        """Independent stream derived from this one (for parallel-safe use)."""
        return RngStream(int(self._gen.integers(0, 2**63 - 1)))
