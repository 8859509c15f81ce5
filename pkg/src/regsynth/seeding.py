"""Deterministic seed derivation.

All randomness in the package flows from a single base seed through named
substreams, so adding a consumer never perturbs the draws of another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, stream: str) -> int:
    """Derive a 63-bit seed for a named substream of ``base``."""
    digest = hashlib.blake2b(f"{base}:{stream}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def substream(base: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, stream))
