"""Seeded, splittable random streams.

Every stochastic component draws from a Philox counter-based generator keyed
by (seed, domain-tagged stream index), so independent pieces of work (epochs,
trials, rounds) get non-overlapping, reproducible streams regardless of
execution order or parallelism.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams from colliding when the same user seed feeds
# different subsystems.
DOMAIN_SHUFFLE = 1
DOMAIN_POPULATION = 2
DOMAIN_TRIAL = 3
DOMAIN_PARTICIPATION = 4
DOMAIN_WLLN = 5
DOMAIN_FIXTURE = 6

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """A Generator for (seed, domain, index), independent of all other streams."""
    key = [seed & _MASK64, ((domain & 0xFFFF) << 48 | (index & _MASK64 >> 16)) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key))
