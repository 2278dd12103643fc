"""Deterministic named random sub-streams derived from one root seed.

Every source of randomness in the toolkit draws from a stream obtained
here, so partial re-runs of the pipeline see the same numbers as full
runs.
"""

import zlib

import numpy as np


def substream(root_seed: int, *tags) -> np.random.Generator:
    """Return a Generator keyed by the root seed and a tag path.

    Tags may be strings or ints; the same (seed, tags) always yields an
    identical stream, and distinct tag paths yield independent streams.
    """
    entropy = [int(root_seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, int):
            entropy.append(tag & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))
