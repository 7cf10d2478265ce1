"""Deterministic fan-out of independent replicates."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable


def run_replicates(fn: Callable[[int], object], n: int, threads: int = 1) -> list:
    """``[fn(0), ..., fn(n - 1)]``, optionally across worker processes.

    Each replicate derives its own random stream from its index, so the
    result does not depend on ``threads``.
    """
    if threads is None or threads <= 1 or n <= 1:
        return [fn(r) for r in range(n)]
    chunk = max(1, n // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n), chunksize=chunk))
