"""Deterministic named RNG streams.

Every stochastic component (weight init, dropout, channel noise, data
shuffling) draws from its own stream derived from a single experiment seed,
so runs are bit-reproducible and streams can be mirrored across processes.
"""

from __future__ import annotations

import zlib

import numpy as np

# Canonical stream names used across the package.
WEIGHTS = "weights"
DROPOUT = "dropout"
CHANNEL_NOISE = "channel-noise"
LINK_NOISE_FWD = "link-noise-fwd"
LINK_NOISE_BWD = "link-noise-bwd"
DATA_SHUFFLE = "data-shuffle"


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return an independent generator for (seed, name, index)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(index)])


class StreamSet:
    """Lazily-created named streams sharing one base seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]
