"""Deterministic random streams.

Every stream is a counter-based Philox generator keyed by (seed, label path),
so a draw is identified by (seed, label, draw index) alone. Splitting by label
yields an independent stream without consuming state from the parent, which is
what makes training resumable: step k of a run re-derives its stream from the
step index instead of replaying k-1 steps.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Splittable counter-based random stream."""

    def __init__(self, seed: int, _path: str = ""):
        self.seed = int(seed)
        self._path = _path
        digest = hashlib.blake2b(
            f"{self.seed}|{_path}".encode(), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label) -> "Rng":
        """Derive an independent stream; the parent is left untouched."""
        return Rng(self.seed, f"{self._path}/{label}")

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float, high: float, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None):
        """Integers in [low, high). Scalar int when shape is None."""
        out = self._gen.integers(low, high, size=shape)
        return int(out) if shape is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def name_seed(name: str) -> int:
    """Stable 64-bit seed derived from a string (e.g. a sample filename)."""
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
