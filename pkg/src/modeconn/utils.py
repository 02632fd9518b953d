"""
Utility functions for the modeconn package.

This module provides helpers shared across the package: seeded random streams
derived from one root seed, real-number formatting for CSV output, and an
ordered worker-pool map used by the experiment runners.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

import numpy as np

from .config import worker_count

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Creates a counter-based generator for one cell of an experiment.

    The stream is a pure function of the root seed and the key path, so cells can
    be evaluated in any order or on any worker and still draw identical numbers.

    Args:
        seed: The root seed of the run.
        *keys: Non-negative integers identifying the cell (e.g. class, pair index).

    Returns:
        A numpy Generator backed by Philox.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def format_real(value: float) -> str:
    """Formats a real with 17 significant digits, enough to round-trip a float64."""
    return f"{float(value):.17g}"


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int = 0) -> List[R]:
    """
    Applies `func` to every item, possibly on a thread pool, preserving input order.

    Args:
        func: The function to apply. It must not mutate shared state.
        items: The inputs.
        workers: Pool size; 0 resolves it from MODECONN_THREADS.

    Returns:
        The results in the order of `items`, independent of the pool size.
    """
    item_list: List[T] = list(items)
    n_workers: int = worker_count(workers or None)
    if n_workers <= 1 or len(item_list) <= 1:
        return [func(item) for item in item_list]
    logger.debug(f"Dispatching {len(item_list)} tasks to {n_workers} workers")
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(func, item_list))


def describe(values: Sequence[float]) -> dict:
    """
    Descriptive statistics used by the barrier reports.

    Returns:
        A dict with mean, median, q1, q3, min and max (NaN for empty input).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        nan = float("nan")
        return {"mean": nan, "median": nan, "q1": nan, "q3": nan, "min": nan, "max": nan}
    return {
        "mean": float(np.mean(arr)),
        "median": float(np.median(arr)),
        "q1": float(np.percentile(arr, 25)),
        "q3": float(np.percentile(arr, 75)),
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
    }
