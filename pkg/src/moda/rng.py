"""Counter-based random streams.

Every source of randomness in the library draws from a Philox generator
keyed by ``(seed, stream)``. Identical keys give identical streams on any
platform, which is what makes datasets, initialization, and shuffling
reproducible bit-for-bit.
"""
from __future__ import annotations

import numpy as np

# Stream ids. Epoch shuffling uses STREAM_SHUFFLE + epoch so each epoch has
# its own independent stream under the same seed.
STREAM_INIT = 1
STREAM_BLOBS = 2
STREAM_SPLIT = 3
STREAM_OVERFIT = 4
STREAM_SWEEP = 5
STREAM_GRADCHECK = 6
STREAM_SHUFFLE = 1000


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Generator whose output depends only on (seed, stream)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(stream & 0xFFFFFFFFFFFFFFFF)])
    return np.random.Generator(np.random.Philox(key=key))
