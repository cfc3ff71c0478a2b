"""
Named random streams.

Every stochastic step takes an explicit numpy Generator built on the
counter-based Philox bit generator. Streams are derived from a root seed and a
path of names, so the same (seed, path) always yields the same draws regardless
of what other streams were consumed before.
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _word(part: Key) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_stream(seed: int, *path: Key) -> np.random.Generator:
    """Generator for `path` under `seed`; distinct paths give independent streams"""
    entropy = [_word(seed), *(_word(p) for p in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: Key) -> int:
    """Integer seed for libraries that take plain ints (scikit-learn)"""
    return int(make_stream(seed, *path).integers(0, 2**31 - 1))
