"""Stable, order-free derivation of RNG streams from structured keys.

Every stochastic draw in the simulator, detectors and engine is keyed by
(master seed, purpose, entity/frame/...) rather than by call order, so any
subsystem can be re-run in isolation and reproduce the exact same values.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def stable_seed(*parts) -> int:
    """Hash a tuple of ints/floats/strings/bytes to a 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bool):
            h.update(b"b" + (b"\x01" if p else b"\x00"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        elif isinstance(p, (float, np.floating)):
            h.update(b"f" + struct.pack("<d", float(p)))
        elif isinstance(p, str):
            h.update(b"s" + p.encode())
        elif isinstance(p, bytes):
            h.update(b"y" + p)
        elif isinstance(p, np.ndarray):
            h.update(b"a" + np.ascontiguousarray(p, dtype=float).tobytes())
        else:
            raise TypeError(f"unsupported seed part type {type(p)!r}")
        h.update(b"|")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    """A fresh Generator deterministically keyed by the given parts."""
    return np.random.Generator(np.random.Philox(stable_seed(*parts)))
