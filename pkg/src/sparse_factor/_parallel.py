"""Order-preserving task map used for folds, grid points and replications."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def map_tasks(fn, items, threads: int = 1) -> list:
    """Apply ``fn`` to every item; results keep the input order.

    Each task must be a deterministic function of its item, so the output
    does not depend on ``threads``.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
