"""Keyed random streams.

Every noise source draws from its own Philox stream keyed by
``(seed, *key)``, e.g. ``(seed, vehicle, "gnss")``. Row ``k`` of a draw is the
sample for tick ``k``. Adding a vehicle or a sensor creates new keys and leaves
every existing stream untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise TypeError(f"stream key parts must be str or non-negative int, got {part!r}")


def stream(seed: int, *key) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_word(k) for k in key]
    philox_key = np.random.SeedSequence(words).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=philox_key))


def normals(seed: int, key: tuple, n: int, dim: int = 1) -> np.ndarray:
    """Standard normal block of shape ``(n, dim)`` for ticks ``0..n-1``."""
    return stream(seed, *key).standard_normal((n, dim))
