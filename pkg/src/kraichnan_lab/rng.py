"""Counter-based random streams keyed by (master seed, purpose, replica, block).

Each stream is a Philox generator whose key is derived from a
``SeedSequence`` spawn key, so replica sets can grow without reshuffling
existing draws and any time slot can be regenerated without replaying the
earlier ones. Draws are produced in fixed-size blocks of steps; slot ``k``
of a stream always maps to row ``k % block`` of block ``k // block``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

BLOCK_STEPS = 64


def _purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def _zigzag(k: int) -> int:
    # SeedSequence spawn keys must be nonnegative; slots may be negative (runs from -M)
    return 2 * k if k >= 0 else -2 * k - 1


def generator(master_seed: int, purpose: str, replica: int, block: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(_purpose_id(purpose), int(replica), _zigzag(int(block))))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class RngStream:
    """Standard normal draws for one (replica, purpose) pair, addressable by slot index."""

    master_seed: int
    replica_index: int
    purpose: str
    shape: tuple = ()
    block_steps: int = BLOCK_STEPS
    _cache: dict = field(default_factory=dict, repr=False)

    def block(self, b: int) -> np.ndarray:
        arr = self._cache.get(b)
        if arr is None:
            g = generator(self.master_seed, self.purpose, self.replica_index, b)
            arr = g.standard_normal((self.block_steps,) + tuple(self.shape))
            # one live block is enough for forward stepping
            self._cache.clear()
            self._cache[b] = arr
        return arr

    def normals(self, slot: int) -> np.ndarray:
        b, r = divmod(int(slot), self.block_steps)
        return self.block(b)[r]

    def generator(self, slot: int = 0) -> np.random.Generator:
        """Free-form generator for one-off draws (initial positions and the like)."""
        return generator(self.master_seed, self.purpose, self.replica_index, slot)
