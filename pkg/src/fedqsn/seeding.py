"""Deterministic seed derivation.

Every random draw in the package is keyed by a tuple such as
``(master_seed, "client-mask", round, client_id)`` so results never depend
on call order or on how many other draws happened first.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def _encode(key) -> bytes:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("bool is not a valid seed key")
    if isinstance(key, (int, np.integer)):
        return b"i" + struct.pack("<Q", int(key) & MASK64)
    if isinstance(key, str):
        raw = key.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    raise TypeError(f"unsupported seed key type {type(key).__name__}")


def derive_seed(*keys) -> int:
    """Hash ``keys`` into an unsigned 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(_encode(key))
    return int.from_bytes(h.digest(), "little")


def rng(*keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
