"""Deterministic random streams.

Every stochastic choice in the project draws from a Philox counter-based
generator keyed by a user seed plus a stream tag, so simulation, training,
and sampling replay bit-for-bit for a given seed. Stream keys are derived
with a splitmix64 hash of the tag path, which keeps independent subsystems
(synthesis, masking, sampling, ...) on non-overlapping streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive(seed: int, *tags: int | str) -> int:
    """Mix a base seed with tags into a 64-bit stream key.

    Tags may be ints or short strings; the same (seed, tags) always maps to
    the same key and distinct tag paths map to distinct keys with
    overwhelming probability.
    """
    h = _splitmix64(seed & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                h = _splitmix64(h ^ b)
        else:
            h = _splitmix64(h ^ (int(tag) & _MASK64))
    return h


def stream(seed: int, *tags: int | str) -> np.random.Generator:
    """Philox generator for the stream identified by (seed, tags)."""
    key = derive(seed, *tags)
    return np.random.Generator(np.random.Philox(key=np.array([key, seed & _MASK64], dtype=np.uint64)))
