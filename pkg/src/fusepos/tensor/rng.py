"""Explicitly passed random streams.  Nothing in the package touches a global RNG."""
from __future__ import annotations

import zlib

import numpy as np


class RngStream:
    """Seeded PCG64 stream.  Child streams are derived by name, so adding a
    new consumer never shifts the draws of an existing one."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, name: str | int) -> RngStream:
        tag = name if isinstance(name, int) else zlib.crc32(str(name).encode())
        return RngStream(self.seed, self.key + (int(tag),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"
