"""Named RNG substreams derived from one master seed.

Every source of randomness in a run pulls from its own stream so that
changing one component (say, policy init) never perturbs another (say,
track generation for env 3).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the stream `name` under `seed`."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_stream_key(name),))
    return np.random.Generator(np.random.PCG64(ss))


def substream_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed for the stream, for torch and friends."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_stream_key(name),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
