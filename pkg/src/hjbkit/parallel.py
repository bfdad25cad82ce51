"""Order-preserving parallel map over independent point tasks."""

import os
from concurrent.futures import ProcessPoolExecutor

__all__ = ["default_workers", "pmap"]


def default_workers():
    try:
        return max(1, int(os.environ.get("HJB_WORKERS", "1")))
    except ValueError:
        return 1


def pmap(fn, items, workers=None):
    """``[fn(item) for item in items]`` spread over ``workers`` processes.

    Results come back in input order, so outputs do not depend on the
    worker count. ``fn`` and the items must be picklable.
    """
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
