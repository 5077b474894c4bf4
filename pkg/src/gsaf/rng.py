"""Named random substreams derived from a single root seed.

Every consumer of randomness (data generation, parameter init, shot
sampling, sweep subset selection, ...) draws from its own substream so that
adding or removing one consumer never perturbs the draws seen by another.
"""

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    raise TypeError(f"substream keys must be str or int, got {type(key).__name__}")


def substream(seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the substream identified by ``keys``.

    The same (seed, keys) pair always yields an identical stream; distinct
    key tuples yield statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
