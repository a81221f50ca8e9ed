"""Fixed-size worker pools: one task per thread id, joined before returning (a barrier)."""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

_pools: dict[int, ThreadPoolExecutor] = {}
_lock = threading.Lock()


def _pool(t: int) -> ThreadPoolExecutor:
    with _lock:
        pool = _pools.get(t)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=t, thread_name_prefix=f"mcfv-t{t}")
            _pools[t] = pool
        return pool


def run_parallel(fn: Callable[[int], T], t: int) -> list[T]:
    """Run ``fn(i)`` for i in range(t) on a pool of exactly t workers; results in thread order."""
    if t < 1:
        raise ValueError("thread count must be >= 1")
    if t == 1:
        return [fn(0)]
    return list(_pool(t).map(fn, range(t)))
