"""Counter-based random streams.

A stream is identified by a tuple of integer keys (base seed, sample index,
epoch, ...). Keys are folded with SplitMix64 and the result keys a Philox
generator, so a draw depends only on its keys, never on generation order or
worker count.
"""
import zlib
from typing import Union

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _as_int(key: Union[int, str]) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & MASK64


def derive_seed(*keys: Union[int, str]) -> int:
    """Fold keys into one 64-bit seed."""
    state = 0
    for key in keys:
        state = splitmix64(state ^ _as_int(key))
    return state


def generator(*keys: Union[int, str]) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(*keys)))
