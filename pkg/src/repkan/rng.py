"""Seeded random number generation.

All stochastic behaviour in the package (weight init, data synthesis,
shuffling, augmentation) draws from Philox counter-based generators.
Philox is a named 64-bit algorithm with identical output on every
platform, and it is splittable: ``stream(seed, stream_id)`` yields
independent generators for the same seed, so adding a consumer never
perturbs the draws of existing ones.

Stream ids used by the package:

====  =======================================
 id   consumer
====  =======================================
 0    model parameter initialization
 1    dataset synthesis
 2    epoch shuffling (offset by epoch index)
 3    augmentation (offset by epoch index)
 4    random probes (fusion checks, reports)
====  =======================================
"""

import numpy as np

STREAM_INIT = 0
STREAM_DATA = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_PROBE = 4

# offset multiplier keeping per-epoch streams disjoint
_EPOCH_STRIDE = 1 << 20


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Return a Generator for (seed, stream_id), independent across ids."""
    return np.random.Generator(np.random.Philox(key=(int(seed) & (2**64 - 1), int(stream_id))))


def epoch_stream(seed: int, stream_id: int, epoch: int) -> np.random.Generator:
    """Per-epoch substream (deterministic, disjoint across epochs)."""
    return stream(seed, stream_id + _EPOCH_STRIDE * (epoch + 1))
