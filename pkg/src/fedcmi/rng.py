"""Counter-based random streams keyed by (master seed, purpose, ids...)."""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Independent Philox generator for one (purpose, ids) tuple.

    The draw sequence depends only on the key, never on how many other
    streams were consumed before, so scheduling cannot change sampled values.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_code(purpose), *(int(i) for i in ids)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
