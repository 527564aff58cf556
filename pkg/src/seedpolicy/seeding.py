"""Deterministic RNG stream derivation.

Every random draw in the library comes from a generator built by
:func:`make_rng` from an integer seed plus string/int subkeys, so
independent components (parameter init, noise, episode randomization)
get decoupled streams that are bitwise reproducible across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["make_rng", "key_to_int"]


def key_to_int(key: str | int) -> int:
    if isinstance(key, int):
        return key
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*keys: str | int) -> np.random.Generator:
    """PCG64 generator seeded from a tuple of ints/strings."""
    entropy = [key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
