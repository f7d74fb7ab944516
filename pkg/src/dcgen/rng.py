"""Counter-based random number generation.

Every draw is produced by a fresh Philox generator whose 128-bit key is derived
from (seed, stream path, draw index). There is no mutable global stream: the
value of a draw depends only on its key, never on how many draws happened
elsewhere in the program. Training loops exploit this by keying each step's
draws with the absolute step number, which makes interrupted-and-resumed runs
bitwise identical to uninterrupted ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, path: tuple, counter: int) -> np.ndarray:
    material = repr((int(seed), path, int(counter))).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


class Rng:
    """Deterministic stream of draws identified by seed and stream path.

    `child(*tags)` derives an independent stream; tags may be ints or strings.
    Each call to a drawing method advances a local counter, so repeated calls
    on one Rng give fresh values, while re-creating the same Rng replays them.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._counter = 0

    def child(self, *tags) -> "Rng":
        for t in tags:
            if not isinstance(t, (int, str)):
                raise TypeError(f"stream tags must be int or str, got {type(t).__name__}")
        return Rng(self.seed, self.path + tuple(tags))

    def _gen(self) -> np.random.Generator:
        key = _derive_key(self.seed, self.path, self._counter)
        self._counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        out = self._gen().standard_normal(size=shape, dtype=np.float64)
        return (out * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        out = self._gen().random(size=shape, dtype=np.float64)
        return (low + (high - low) * out).astype(dtype)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen().integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)
