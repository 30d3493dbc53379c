"""Labeled, splittable random streams.

Every stochastic choice in the package draws from a stream keyed by a root
seed plus a tuple of labels, so adding a new consumer never shifts the draws
of an existing one. Streams are Philox (counter-based) generators.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *labels: object) -> int:
    payload = repr((int(seed),) + tuple(str(x) for x in labels)).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=16).digest(), "little")


def stream(seed: int, *labels: object) -> np.random.Generator:
    """Return an independent generator for ``(seed, *labels)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def derive_seed(seed: int, *labels: object) -> int:
    """A 63-bit child seed, for APIs that take integer seeds."""
    return stream_key(seed, *labels) & ((1 << 63) - 1)
