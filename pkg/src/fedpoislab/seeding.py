"""Deterministic RNG derivation.

Every source of randomness in the lab is a numpy Generator spawned from an
integer root seed plus a context path (client id, round index, a short tag
string, ...). The same (seed, path) always yields the same stream, which is
what makes whole experiments bit-reproducible and lets per-client work run
in any order.
"""

import zlib

import numpy as np


def _as_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"seed path entries must be int or str, got {type(key)!r}")


def spawn(*keys) -> np.random.Generator:
    """Generator keyed by an integer/string path, e.g. spawn(seed, 'init', 3)."""
    if not keys:
        raise ValueError("spawn needs at least one key")
    return np.random.default_rng([_as_int(k) for k in keys])
