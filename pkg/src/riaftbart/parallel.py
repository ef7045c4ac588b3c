"""Task pool for independent chains, permutations, bootstraps and replicates.

Results always come back in submission order so reductions are deterministic
regardless of the worker count.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def map_tasks(fn, tasks, jobs=1):
    tasks = list(tasks)
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def derive_seed(master, *index):
    """Child seed for task ``index`` of a run seeded with ``master``."""
    import numpy as np

    return int(np.random.SeedSequence([int(master), *map(int, index)]).generate_state(1)[0])
