"""Counter-based keyed randomness.

Every random draw in the simulator is a pure function of (seed, domain,
integer tag, index).  This makes construction order-independent: the k-th
sampling at a given tree position receives the same uniform no matter which
algorithm (greedy fixed-budget or layer-by-layer threshold) asks for it, and
no matter when.  That property is what lets the two construction algorithms
be compared node-for-node.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

_SCALE = 2.0 ** -64


def _digest(seed: int, domain: str, ints: Iterable[int], index: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(domain.encode("utf-8"))
    h.update(b"\x00")
    h.update(struct.pack("<q", seed))
    for v in ints:
        h.update(struct.pack("<q", int(v)))
    h.update(struct.pack("<q", index))
    return int.from_bytes(h.digest(), "little")


def keyed_uniform(seed: int, domain: str, tag: Iterable[int], index: int) -> float:
    """Uniform in [0, 1) fully determined by (seed, domain, tag, index)."""
    return _digest(seed, domain, tag, index) * _SCALE


def derive_seed(seed: int, domain: str, *ints: int) -> int:
    """Derive an independent 63-bit child seed from a parent seed."""
    return _digest(seed, domain, ints, 0) >> 1


class UniformStream:
    """Sequential uniforms keyed by a seed; draw order defines the stream."""

    def __init__(self, seed: int, domain: str = "stream"):
        self._seed = seed
        self._domain = domain
        self._counter = 0

    def next(self) -> float:
        u = keyed_uniform(self._seed, self._domain, (), self._counter)
        self._counter += 1
        return u
