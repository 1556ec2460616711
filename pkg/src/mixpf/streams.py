"""Reproducible, independent random streams keyed by tuples of identifiers.

Every stochastic stage (simulation run, training step, evaluation run)
derives its generator from the experiment seed plus a structured key, so
runs are reproducible and safely parallelisable.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


def substream(*keys) -> np.random.Generator:
    """A generator uniquely determined by the key tuple (ints or short strings)."""
    if not keys:
        raise ValueError("at least one key is required")
    return np.random.default_rng(np.random.SeedSequence([_as_int(k) for k in keys]))
