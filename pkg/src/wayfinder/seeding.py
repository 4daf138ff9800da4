"""Seed derivation helpers.

Every stochastic routine takes either an integer seed or a ready
``numpy.random.Generator``. Per-item seeds are derived from the master seed
and the item index so that parallel and sequential generation agree.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.Generator]


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def mix(master_seed: int, *keys) -> int:
    """Deterministically combine a master seed with item keys into a 63-bit seed."""
    ss = np.random.SeedSequence([_key_to_int(master_seed), *(_key_to_int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(mix(master_seed, *keys))
