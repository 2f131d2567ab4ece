"""Counter-based random streams.

Every consumer derives an independent Philox stream from a seed plus a
tuple of labels (e.g. ``stream(seed, "triplet", i)``), so parallel and
serial generation of the same records draw identical values.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts) -> list[int]:
    """Derive a 2-word Philox key from arbitrary hashable labels."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=16).digest()
    return [int.from_bytes(h[:8], "little"), int.from_bytes(h[8:], "little")]


def stream(*parts) -> np.random.Generator:
    """Independent deterministic generator for the given label tuple."""
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))
