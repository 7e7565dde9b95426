"""Named, hierarchical random streams derived from one root seed.

``derive_rng(seed, "augment", step)`` always yields the same generator for
the same arguments, independent of how many other streams were consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_seed(seed: int, *parts) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in parts))


def derive_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *parts))
