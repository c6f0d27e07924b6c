"""
Deterministic random streams.
One master seed; every consumer derives its own counter-based (Philox) stream keyed by
(purpose tag, round, client, ...), so execution order and worker count never change results.
"""
import hashlib
from functools import lru_cache

import numpy as np

# Purpose tags used across the simulator
TAG_BLOBS = "blobs"
TAG_PARTITION = "partition"
TAG_INIT = "init"
TAG_SAMPLE = "sample"
TAG_CLIENT = "client"


@lru_cache(maxsize=None)
def _tag_key(tag: str) -> int:
    if not tag:
        raise ValueError("stream tag must be non-empty")
    digest = hashlib.sha256(tag.encode("ascii")).digest()
    return int.from_bytes(digest[:4], "little", signed=False)


def derive_seed_sequence(master_seed: int, tag: str, *keys: int) -> np.random.SeedSequence:
    """SeedSequence for (master_seed, tag, *keys). All keys must be non-negative ints."""
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    for k in keys:
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {keys}")
    return np.random.SeedSequence(int(master_seed), spawn_key=(_tag_key(tag),) + tuple(int(k) for k in keys))


def stream(master_seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Independent Philox generator for one purpose."""
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, tag, *keys)))
