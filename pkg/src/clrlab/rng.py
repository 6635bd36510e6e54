"""Keyed counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *index)``.  Two streams with different keys are
statistically independent, and the same key always yields the same stream, so
results do not depend on the order in which work is scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(seed: int, purpose: str, index: tuple[int, ...]) -> list[int]:
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF,
             zlib.crc32(purpose.encode("utf-8"))]
    for i in index:
        words.append(int(i) & 0xFFFFFFFF)
    return words


def make_rng(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *index)``."""
    ss = np.random.SeedSequence(_entropy(seed, purpose, index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, purpose: str, *index: int) -> int:
    """Derive a non-negative 63-bit integer seed for a sub-task."""
    ss = np.random.SeedSequence(_entropy(seed, purpose, index))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | ((int(hi) & 0x7FFFFFFF) << 32)
