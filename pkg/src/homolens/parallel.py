"""Order-preserving process-pool map."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def resolve_workers(workers=None):
    if workers is None:
        env = os.environ.get("HOMOLENS_WORKERS")
        workers = int(env) if env else 1
    return max(1, int(workers))


def parallel_map(fn, items, workers=None):
    """[fn(x) for x in items], fanned out over processes when workers > 1.

    Results come back in input order, so aggregation downstream is deterministic.
    """
    items = list(items)
    workers = resolve_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
