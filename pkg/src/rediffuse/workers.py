"""Worker-pool sizing shared by the data generator and the verification grids."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "REDIFFUSE_THREADS"


def worker_count() -> int:
    """``REDIFFUSE_THREADS`` if set to a positive integer, else the logical core count."""
    raw = os.environ.get(ENV_VAR, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


def ordered_map(fn, items):
    """``map`` over a thread pool; results come back in input order."""
    items = list(items)
    n = min(worker_count(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
