"""Counter-based random streams.

Every draw in the package comes from a generator keyed by
(seed, purpose, counters...), so results never depend on the order in which
work is scheduled.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    key = (zlib.crc32(purpose.encode()),) + tuple(int(c) for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
