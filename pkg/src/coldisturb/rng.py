"""Counter-based seeding helpers.

Every random draw in the toolkit is a pure function of a seed and an integer
key, so results do not depend on iteration order.  The mixer is SplitMix64's
finalizer; ``derive_seed`` folds a stream name into a master seed with it.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    x = (x + _GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer; wraps modulo 2**64."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(_GOLDEN)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def derive_seed(master: int, name: str) -> int:
    """Split a master seed into an independent per-stream seed.

    The stream name is hashed with SHA-256 (stable across Python runs, unlike
    ``hash``) and mixed with the master seed, so adding a new stream name never
    changes the seed of an existing one.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return mix64((master & MASK64) ^ mix64(tag))


def hash_keys(seed: int, stream: int, keys: np.ndarray) -> np.ndarray:
    """64-bit hash of integer ``keys`` under (seed, stream)."""
    base = np.uint64(mix64((seed & MASK64) ^ mix64(stream)))
    with np.errstate(over="ignore"):
        return mix64_array(mix64_array(np.asarray(keys, dtype=np.uint64)) ^ base)


def uniform_keys(seed: int, stream: int, keys: np.ndarray) -> np.ndarray:
    """Uniform floats in the open interval (0, 1), one per key."""
    h = hash_keys(seed, stream, keys) >> np.uint64(11)
    return (h.astype(np.float64) + 0.5) * (1.0 / (1 << 53))


def normal_keys(seed: int, stream: int, keys: np.ndarray) -> np.ndarray:
    """Standard normal draws via Box-Muller over two keyed uniform streams."""
    u1 = uniform_keys(seed, 2 * stream, keys)
    u2 = uniform_keys(seed, 2 * stream + 1, keys)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
