"""Process-level parallel map with an environment cap on workers."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

ENV_THREADS = "QRTD_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Number of worker processes, capped by ``QRTD_THREADS`` when set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(ENV_THREADS)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def pmap(fn, items, workers: int | None = None, chunksize: int = 1) -> list:
    """Ordered map; results never depend on the number of workers."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
