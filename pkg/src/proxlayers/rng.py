"""Seeded random streams.

Every experiment draws from ``numpy.random.Generator(Philox(key=seed))``.
Philox is a counter-based generator, so the stream for a given seed is fixed
by numpy's published algorithm (Philox4x64-10) rather than by whatever the
default bit generator of the installed numpy happens to be.
"""

import numpy as np

__all__ = ["make_rng", "substream"]


def make_rng(seed):
    """Generator whose Philox key is the non-negative integer ``seed``."""
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed))


def substream(seed, index):
    """Stream number ``index`` for ``seed``: the same key with the counter
    advanced by ``index * 2**128`` draws, so streams never overlap."""
    bitgen = np.random.Philox(key=int(seed))
    bitgen = bitgen.jumped(int(index)) if index else bitgen
    return np.random.Generator(bitgen)
