"""Thread-pool scheduling of independent data shards."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from .monitor import load_budget

S = TypeVar("S")
R = TypeVar("R")


def worker_cap() -> int:
    """Upper bound on worker threads (``task_limits.max_parallel_tasks``)."""

    limits = load_budget().get("task_limits", {})
    return max(1, int(limits.get("max_parallel_tasks", os.cpu_count() or 1)))


class ShardScheduler:
    """Run one function over many shards with at most ``max_workers`` threads.

    Results always come back in shard order, so reductions over them are
    independent of the worker count.
    """

    def __init__(self, max_workers: int = 1) -> None:
        self.max_workers = max(1, int(max_workers))

    def map(self, fn: Callable[[S], R], shards: Iterable[S]) -> List[R]:
        shards = list(shards)
        if self.max_workers == 1 or len(shards) <= 1:
            return [fn(shard) for shard in shards]
        workers = min(len(shards), self.max_workers)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(fn, shard) for shard in shards]
            return [f.result() for f in futures]
