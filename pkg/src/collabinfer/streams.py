"""Independent random streams keyed by (seed, task, purpose).

Hashing the key instead of spawning sequentially means a stream does not
depend on how many other tasks or grid cells ran before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(seed: int, task_id: str, purpose: str) -> int:
    key = f"{int(seed)}\x1f{task_id}\x1f{purpose}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=16).digest(), "little")


def derive_rng(seed: int, task_id: str, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, task_id, purpose)))
