"""Counter-based random streams keyed by (seed, round, purpose, worker)."""
from __future__ import annotations

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("ascii"))


def stream(seed: int, round_index: int, purpose: str, worker: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, round, purpose, worker) key.

    Streams do not depend on how many other streams were drawn before, so
    workers can be scheduled in any order or in parallel.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, round_index, _tag(purpose), worker])
    return np.random.Generator(np.random.PCG64(ss))
