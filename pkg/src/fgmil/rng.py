"""Deterministic substream derivation for seeded randomness.

Every stochastic component draws from a Generator obtained through
``rng_for(root_seed, *keys)`` so that runs are reproducible bit-for-bit
and independent components never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_for(root_seed: int, *keys) -> np.random.SeedSequence:
    """Child seed sequence keyed by (root_seed, *keys); strings hash stably."""
    entropy = [_key_to_int(root_seed)] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def rng_for(root_seed: int, *keys) -> np.random.Generator:
    """Generator for the substream identified by (root_seed, *keys)."""
    return np.random.default_rng(seed_for(root_seed, *keys))
