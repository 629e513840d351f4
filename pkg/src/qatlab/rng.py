"""Seeded random streams.

All randomness in a run flows from one integer seed. Named child streams
(``data``, ``init``, ``noise``, ``timesteps`` ...) are derived with a stable
hash of the name, so adding a new stream never perturbs an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.path])))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (_name_key(name),))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
