"""Named random sub-streams derived from one experiment seed."""
from __future__ import annotations

import numpy as np

STREAMS = {"datagen": 0, "init": 1, "shuffle": 2, "augment": 3, "eval": 4}


def _key(seed: int, stream: str, idx) -> list[int]:
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}; known: {sorted(STREAMS)}")
    return [int(seed), STREAMS[stream], *(int(i) for i in idx)]


def stream_rng(seed: int, stream: str, *idx: int) -> np.random.Generator:
    """Independent generator for (seed, stream, idx...); same key, same sequence."""
    return np.random.default_rng(_key(seed, stream, idx))


def derive_seed(seed: int, stream: str, *idx: int) -> int:
    return int(np.random.SeedSequence(_key(seed, stream, idx)).generate_state(1, dtype=np.uint32)[0])
