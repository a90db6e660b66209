"""Deterministic named random streams derived from one master seed.

Every source of randomness in training and decoding pulls from its own
named stream, so results never depend on scheduling order or on how many
other streams were consumed in between. Stream derivation must be stable
across processes, so names are hashed with FNV-1a rather than Python's
salted ``hash()``.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET64 = 0xCBF29CE484222325
_FNV_PRIME64 = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET64
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME64) & _MASK64
    return h


class RngHub:
    """Factory for independent, reproducibly named random generators.

    ``hub.stream(name)`` always returns a fresh generator whose output
    depends only on ``(master_seed, name)``. Consuming one stream never
    affects any other.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def stream(self, name: str) -> np.random.Generator:
        key = _fnv1a64(name.encode("utf-8"))
        seq = np.random.SeedSequence([self.master_seed & _MASK64, key])
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, name: str) -> "RngHub":
        """Hub whose streams are disjoint from this hub's for any names."""
        key = _fnv1a64(name.encode("utf-8"))
        derived = (self.master_seed ^ (key * _FNV_PRIME64)) & _MASK64
        return RngHub(derived)

    def __repr__(self) -> str:
        return f"RngHub(master_seed={self.master_seed})"
