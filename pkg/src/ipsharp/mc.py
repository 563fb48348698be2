"""Replication sharding.

Replications are cut into shards whose size depends only on the workload,
never on the thread count; shard ``j`` draws from the stream ``(seed, j)``.
Results are therefore identical for any number of threads.  Kernels release
the GIL under numba, so a thread pool gives real parallelism.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

from .graphical import make_rng

R_ = TypeVar("R_")

ROW_BUDGET = 2_000_000  # floats per shard for the atom-time matrix
MAX_SHARD = 8192


def shard_size(n_sites: int, M: float, T: float, per_rep_factor: int = 1) -> int:
    K = M * T + 6.0 * math.sqrt(M * T) + 8
    return int(max(1, min(MAX_SHARD, ROW_BUDGET // max(1, int(n_sites * K * per_rep_factor)))))


def plan(reps: int, size: int) -> list[tuple[int, int]]:
    """[(shard index, replications)] covering ``reps``."""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    out = []
    j = 0
    left = reps
    while left > 0:
        c = min(size, left)
        out.append((j, c))
        left -= c
        j += 1
    return out


def run_sharded(worker: Callable[[np.random.Generator, int, int], R_], reps: int, seed: int,
                size: int, threads: int = 1, stream_base: int = 0) -> list[R_]:
    """Call ``worker(rng, count, shard)`` per shard; results in shard order."""
    shards = plan(reps, size)

    def call(item):
        j, count = item
        return worker(make_rng(seed, stream_base + j), count, j)

    if threads <= 1 or len(shards) == 1:
        return [call(s) for s in shards]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(call, shards))
