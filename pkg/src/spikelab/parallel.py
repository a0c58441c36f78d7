import os
from concurrent.futures import ThreadPoolExecutor

JOBS_ENV = "SPIKELAB_JOBS"


def default_jobs():
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def map_jobs(fn, items, jobs=1):
    """Ordered map; results come back in input order whatever ``jobs`` is."""
    items = list(items)
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
