"""Deterministic randomness helpers.

Every random draw in the package flows through `rng_for`, a counter-based
Philox generator keyed by a stable 64-bit hash of the caller's key tuple.
Same key parts, same stream, on any platform and numpy version.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash.  Stable by definition; also used by the matcher."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def key64(*parts: int | str) -> int:
    """Collapse a mixed key tuple into one 64-bit Philox key."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return fnv1a64(blob)


def rng_for(*parts: int | str) -> np.random.Generator:
    """Generator keyed by `parts`.  Independent streams for distinct keys."""
    return np.random.Generator(np.random.Philox(key=key64(*parts)))
