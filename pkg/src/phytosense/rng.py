"""Named, splittable random streams.

Every random draw in the package comes from a ``numpy.random.Generator``
backed by PCG64 (64-bit state) whose ``SeedSequence`` is keyed by the global
seed plus a purpose tag and optional integer sub-keys.  Streams for different
purposes never overlap, and a stream's output does not depend on how many
other streams were consumed before it or on thread scheduling.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "split": 1,
    "folds": 2,
    "synth": 3,
    "search": 4,
    "hgb": 5,
    "test": 99,
}


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, *keys)``."""
    try:
        tag = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown RNG purpose {purpose!r}; known: {sorted(PURPOSES)}") from None
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *(int(k) for k in keys)))
    return np.random.Generator(np.random.PCG64(ss))
