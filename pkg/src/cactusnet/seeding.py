"""Deterministic seed derivation.

Every stochastic step in the library draws from a generator seeded by a
pure integer function of (master seed, job identity).  That keeps sweeps
reproducible regardless of execution order or worker count, and keeps
the derivation stable across library versions (unlike ``hash()``).
"""

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(*parts: int) -> int:
    """Mix integer identifiers into a single 63-bit seed."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = _splitmix64((h ^ (int(p) & _MASK)) & _MASK)
    return h >> 1


def rng_for(*parts: int) -> np.random.Generator:
    """Generator seeded from a pure function of the given identifiers."""
    return np.random.default_rng(derive_seed(*parts))
