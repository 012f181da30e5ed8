"""Deterministic RNG derivation.

All stochastic operations take an explicit seed (or Generator) and derive
independent child streams through ``numpy.random.SeedSequence`` spawn keys,
so runs are reproducible and resumable from (root seed, integer key path).
"""

import numpy as np

# stream roles used as the first spawn-key entry
STREAM_BASE = 0
STREAM_TARGET = 1
STREAM_TIME = 2
STREAM_DIAG = 3
STREAM_EVAL = 4


def spawn_rng(seed, *key):
    """Generator for the child stream of ``seed`` addressed by an integer key path."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def as_rng(seed):
    """Coerce an int seed or an existing Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))
