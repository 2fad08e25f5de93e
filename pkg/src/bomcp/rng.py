"""Seeded random streams.

Every stochastic routine in this package takes an explicit
``numpy.random.Generator``; nothing touches numpy's global state. Streams
are built on the counter-based Philox bit generator so that independent
streams can be derived from (seed, stream-id) pairs without correlation.
"""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Return a Generator seeded from one or more integers.

    ``make_rng(seed)`` and ``make_rng(seed, stream_id)`` give independent
    streams; identical keys always give identical streams.
    """
    if not key:
        raise ValueError("make_rng requires at least one seed integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))
