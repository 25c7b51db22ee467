"""Seeded random streams.

Every random draw in fedlab comes from a PCG64 generator keyed by
``(seed, purpose, *keys)``. The purpose name is hashed with CRC-32 so the
mapping is stable across processes and Python versions. Streams for
different purposes or different keys (client id, epoch, round) are
statistically independent, which is what lets partial participation or
parallel execution leave every other stream untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, purpose, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, purpose_id(purpose)]
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {k}")
        entropy.append(k)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
