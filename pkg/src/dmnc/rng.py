"""Deterministic random streams.

All randomness in the package flows through Philox counter-based generators.
Each consumer derives its own stream from ``(run seed, purpose tag)`` by
hashing both through SHA-256 into the Philox key, so e.g. data generation and
parameter initialization never share or disturb each other's streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    key = np.frombuffer(digest, dtype=np.uint64)[:2]  # Philox keys are 128-bit
    return np.random.Generator(np.random.Philox(key=key))
