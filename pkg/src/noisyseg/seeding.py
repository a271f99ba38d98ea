"""Named sub-seeds derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def subseed(seed: int, *names) -> int:
    """Deterministic 32-bit seed for the stream ``names`` under ``seed``."""
    keys = [int(seed) & 0xFFFFFFFF] + [
        n & 0xFFFFFFFF if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names
    ]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, *names))
