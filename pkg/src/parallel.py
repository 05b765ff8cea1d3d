import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, TypeVar

from .errors import InputError

T = TypeVar("T")

THREADS_ENV = "DCRM_THREADS"
# Doubles per chunk; chunking depends on problem size only, never on threads.
CHUNK_ELEMENTS = 1 << 20


def resolve_threads(threads: Optional[int] = None, fallback: Optional[int] = None) -> int:
    """CLI value first, then DCRM_THREADS, then the config file value, then 1."""
    if threads is None:
        env_value = os.getenv(THREADS_ENV)
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                raise InputError(f"{THREADS_ENV} must be an integer, got '{env_value}'")
        else:
            threads = fallback if fallback is not None else 1
    if threads < 1:
        raise InputError("thread count must be at least 1")
    return threads


def chunk_rows(row_width: int) -> int:
    return max(1, CHUNK_ELEMENTS // max(1, row_width))


def chunk_bounds(count: int, rows: int) -> List[Tuple[int, int]]:
    return [(start, min(count, start + rows)) for start in range(0, count, rows)]


def map_chunks(fn: Callable[[int, int], T], count: int, rows: int, threads: int = 1) -> List[T]:
    """fn(start, stop) over fixed member chunks; results come back in chunk order."""
    bounds = chunk_bounds(count, rows)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(start, stop) for start, stop in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))
