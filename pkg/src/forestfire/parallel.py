"""Replica-level parallelism over independent random streams.

Large read-only inputs (environments, tables) are registered in a module
dict before the pool forks, so workers inherit them instead of receiving
pickled copies with every task.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

_SHARED: dict = {}


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("WORKERS", "1")))
    except ValueError:
        return 1


def share(obj) -> int:
    key = id(obj)
    _SHARED[key] = obj
    return key


def shared(key):
    return _SHARED[key]


def run_tasks(fn, tasks, workers=None):
    """Map fn over tasks, in order; sequential when one worker is requested."""
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as ex:
        return list(ex.map(fn, tasks))
