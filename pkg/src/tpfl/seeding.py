"""Named, splittable random streams.

A stream is identified by ``(master_seed, name, *keys)``. The name is hashed
with CRC-32 and, together with the integer keys, becomes the spawn key of a
``numpy.random.SeedSequence``. Streams with different names or keys are
statistically independent, so adding draws to one consumer never shifts
another.

Stream names in use: ``data``, ``partition``, ``init``, ``sampling``,
``patch``, ``noise``, ``backbone``.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "partition", "init", "sampling", "patch", "noise", "backbone")


def stream_key(name: str, *keys: int) -> tuple[int, ...]:
    return (zlib.crc32(name.encode("utf-8")),) + tuple(int(k) for k in keys)


def rng(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown seed stream {name!r}")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=stream_key(name, *keys))
    return np.random.Generator(np.random.PCG64(seq))
