"""Thread-pool map honoring the RSEDITLAB_THREADS worker cap.

Results keep input order, so parallel corpus generation and evaluation emit
the same bytes regardless of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_cap() -> int:
    env = os.environ.get("RSEDITLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return min(4, os.cpu_count() or 1)


def thread_map(fn, items) -> list:
    items = list(items)
    cap = worker_cap()
    if cap <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))
