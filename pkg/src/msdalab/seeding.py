"""Stable seed derivation so every random stream is keyed by meaning.

Strings are hashed with SHA-256 (never Python's salted ``hash``) so the
same (seed, purpose, name, ...) key yields the same stream in every
process and on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts) -> np.random.SeedSequence:
    """SeedSequence derived deterministically from ints and strings."""
    entropy = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(p).encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.SeedSequence(entropy)


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
