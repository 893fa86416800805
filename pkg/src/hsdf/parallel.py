"""Deterministic worker-pool helpers.

HSDF_THREADS picks the worker count (0 or unset = machine cpu count).
Results always come back in input order, so output never depends on the
number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    try:
        n = int(os.environ.get("HSDF_THREADS", "0"))
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


def parallel_map(fn, items):
    """Map preserving input order; serial when one worker or one item."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
