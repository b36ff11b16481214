"""Thread-capped, order-preserving map shared by the numeric modules."""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from sinomap.errors import ConfigError

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "SINOMAP_THREADS"


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value wins, then SINOMAP_THREADS, then 1."""
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"thread count must be >= 1, got {threads}")
        return threads
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Results come back in input order whatever the worker count."""
    items = list(items)
    n_workers = min(resolve_threads(threads), max(len(items), 1))
    if n_workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))
