"""Deterministic seed derivation.

Every random stream is keyed by the master seed plus a path of integers
(stage, chain, sample index, ...), so results do not depend on scheduling.
The mixing function is splitmix64.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    """Fold ``path`` into ``master``: s <- splitmix64(s ^ splitmix64(k)) per key."""
    s = splitmix64(int(master) & _MASK)
    for k in path:
        s = splitmix64(s ^ splitmix64(int(k) & _MASK))
    return s


def rng_for(master: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


# stage keys used in derive_seed paths
STAGE_CERTIFY = 1
STAGE_BOUNDARY = 2
STAGE_SECURE = 3
STAGE_VOLUME = 4
STAGE_SPHERES = 5
STAGE_AUDIT = 6
