"""Keyed deterministic random draws.

Every stochastic quantity in a run is a pure function of (seed, key parts),
so replays are bit-identical regardless of event processing order and sweep
workers never share state.
"""

from __future__ import annotations

import hashlib
import struct

_U64 = 2**64


def derive_seed(seed: int, *key: object) -> int:
    """Derive a 64-bit sub-seed from a base seed and a key tuple."""
    material = repr((seed,) + key).encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")


def _draw_u64(seed: int, key: tuple) -> int:
    # hot path: integer-only keys pack fast; anything else goes through repr
    try:
        material = struct.pack(f"<q{len(key)}q", seed, *key)
    except struct.error:
        material = repr((seed,) + key).encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")


def uniform(seed: int, *key: object) -> float:
    """Uniform draw in [0, 1), deterministic in (seed, key)."""
    return _draw_u64(seed, key) / _U64


def bernoulli(p: float, seed: int, *key: object) -> bool:
    return uniform(seed, *key) < p


class KeyedStream:
    """random.Random-like counter stream rooted at a (seed, key) pair.

    Successive .random() calls advance an internal counter, so a stream
    handed to a consumer yields a reproducible sequence no matter who else
    drew in the meantime.
    """

    def __init__(self, seed: int, *key: object):
        self._seed = derive_seed(seed, *key)
        self._n = 0

    def random(self) -> float:
        u = uniform(self._seed, self._n)
        self._n += 1
        return u
