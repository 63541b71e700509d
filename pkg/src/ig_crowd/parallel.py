from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from .config import settings

T = TypeVar("T")
R = TypeVar("R")

# chunking is independent of the worker count so results never depend on --threads
CHUNK = 32


def resolve_threads(threads: Optional[int]) -> int:
    return max(1, int(threads or settings.THREADS or 1))


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(total: int, size: int = CHUNK) -> List[range]:
    return [range(s, min(s + size, total)) for s in range(0, total, size)]
