"""Named, seedable random streams.

Every consumer of randomness asks for a stream by name, e.g.
``stream(seed, "init")`` or ``stream(seed, "batches", epoch)``. Streams are
Philox generators (counter-based), keyed by a hash of ``(seed, name, *extra)``,
so adding a new consumer never perturbs the draws seen by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, name: str, extra: tuple) -> int:
    text = repr((int(seed), str(name)) + tuple(extra)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str, *extra) -> np.random.Generator:
    """Return a fresh generator for the named stream."""
    return np.random.Generator(np.random.Philox(key=_key(seed, name, extra)))
