"""Deterministic random numbers on a named counter-based generator.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's Philox (4x64, 10 rounds) bit generator keyed by a 64-bit seed
plus a substream path. Philox is counter-based, so the same (seed, path)
yields the same sample stream on every platform, and substreams derived for
different labels are statistically independent without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("substream labels must be non-negative")
        return int(label)
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"substream label must be int or str, got {type(label).__name__}")


class Rng:
    """Seeded random stream with hierarchical substream derivation.

    A fresh ``Rng(seed)`` always produces the same draw sequence; substreams
    are addressed by label path, e.g. ``rng.substream("puzzles", slice_idx)``.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *labels) -> "Rng":
        """Derive an independent stream for (self.path + labels)."""
        return Rng(self.seed, self.path + tuple(_label_to_int(l) for l in labels))

    # -- draws ------------------------------------------------------------

    def normal(self, mean=0.0, std=1.0, size=None, dtype=np.float32):
        out = self._gen.normal(float(mean), float(std), size=size)
        return np.asarray(out, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float32):
        out = self._gen.uniform(float(low), float(high), size=size)
        return np.asarray(out, dtype=dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffled_indices(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
