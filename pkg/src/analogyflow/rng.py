"""Seed handling.

Every run derives all randomness from one root seed. Child streams are
addressed by a tuple of integers (or short string tags hashed to
integers) and expanded with numpy's SeedSequence, which mixes the
entropy through its own hash before feeding a PCG64 generator. Normals
come from ``Generator.standard_normal``.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"seed components must be non-negative, got {part}")
    return int(part) & _MASK64


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``."""
    words = [_tag(seed)] + [_tag(p) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive(seed: int, *path: int | str) -> int:
    """A 63-bit integer seed derived from ``(seed, *path)``."""
    words = [_tag(seed)] + [_tag(p) for p in path]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))
