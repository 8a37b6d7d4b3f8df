import hashlib
import json
import random
import string
import time
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import Callable, Iterable, List

from .log import LOG


def random_string(length=10, include_digits=False):
    """Generate a random string of fixed length """
    letters = string.ascii_lowercase
    if include_digits:
        letters += string.digits

    return "".join(random.choice(letters) for _ in range(length))


def config_hash(d: dict) -> str:
    """sha256 of the canonical json of a config dict"""
    canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> List:
    """Map fn over items, results in input order.
    jobs <= 1 runs inline so the result never depends on thread scheduling"""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))


def debug_info(func):
    @wraps(func)
    def wrap(*args, **kwargs):
        start = time.time()
        LOG.d("start %s", func.__name__)
        ret = func(*args, **kwargs)
        LOG.d("finish %s. Takes %s seconds", func.__name__, time.time() - start)
        return ret

    return wrap
