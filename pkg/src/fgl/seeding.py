"""Seed splitting.

Every stochastic component draws from a generator derived from the master
seed plus a tuple of keys, e.g. ``derive_rng(seed, "local", round, client)``.
String keys are mapped to integers with CRC32 so the split is stable across
processes and Python versions (``hash()`` is salted per process).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return key


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(seed), *(_key_to_int(k) for k in keys)])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def derive_int(seed: int, *keys) -> int:
    """A 32-bit integer sub-seed, handy for passing into APIs that take ints."""
    return int(derive_seed(seed, *keys).generate_state(1)[0])
