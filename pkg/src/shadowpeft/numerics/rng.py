"""Seeded random streams.

Every consumer asks for a stream keyed by integers (seed, site, layer,
step, ...). Streams with different keys are statistically independent and
the same key always reproduces the same stream.
"""
import zlib

import numpy as np


def site_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *key) -> np.random.Generator:
    parts = [int(seed) & 0xFFFFFFFF]
    for k in key:
        parts.append(site_id(k) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(parts))


class DropoutRNG:
    """Hands out per-call dropout streams keyed by (seed, site, layer, step)."""

    def __init__(self, seed: int, step: int = 0):
        self.seed = seed
        self.step = step

    def __call__(self, site: str, layer: int) -> np.random.Generator:
        return stream(self.seed, site, layer, self.step)
