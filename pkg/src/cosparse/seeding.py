"""Deterministic derivation of child seeds and RNG streams from string tags."""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(*parts) -> int:
    """Stable 63-bit seed derived from the given parts (ints, strings, floats)."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng(*parts) -> np.random.Generator:
    return np.random.default_rng(child_seed(*parts))
