"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``.  Streams are derived from a root seed plus a tuple of
integer keys, so any (seed, key...) pair maps to one fixed stream no matter
which other streams were drawn before it.
"""
import zlib

import numpy as np


def _key_int(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def make_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``; keys may be ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def spawn(rng, n):
    """Split ``rng`` into ``n`` child generators."""
    return [np.random.Generator(np.random.PCG64(s)) for s in rng.bit_generator.seed_seq.spawn(n)]
