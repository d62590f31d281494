"""Deterministic RNG streams.

Every generator in the package is derived from the single run seed plus a
tuple of purpose keys (strings or ints), so any unit of work (a client in a
round, a dataset draw) gets its own stream regardless of execution order or
parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def rng_stream(*keys) -> np.random.Generator:
    """Generator seeded from the hash of the key tuple."""
    entropy = [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
