"""Deterministic seed derivation.

Every randomized stage draws from a generator derived from the run seed
plus a stable textual scope, so results are reproducible regardless of
execution order and across processes. Python's builtin ``hash`` is salted
per process and must not be used here.
"""

import hashlib

import numpy as np


def stable_seed(*parts: object) -> int:
    """Map an arbitrary tuple of scope parts to a 64-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def derived_rng(*parts: object) -> np.random.Generator:
    """A PCG64 generator seeded from ``stable_seed(*parts)``."""
    return np.random.Generator(np.random.PCG64(stable_seed(*parts)))
