"""Order-preserving process-pool map with a per-worker shared context."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence

_shared: Any = None


def _init(ctx) -> None:
    global _shared
    _shared = ctx


def _call(args):
    fn, item = args
    return fn(_shared, item)


def map_ordered(fn: Callable[[Any, Any], Any], ctx, items: Sequence, workers: int = 1) -> list:
    """``[fn(ctx, item) for item in items]``, optionally spread over processes.

    Results come back in input order, so the output never depends on ``workers``.
    ``fn`` must be a module-level function.
    """
    if workers <= 1 or len(items) < 2:
        return [fn(ctx, it) for it in items]
    chunk = max(1, len(items) // (8 * workers))
    with ProcessPoolExecutor(workers, initializer=_init, initargs=(ctx,)) as ex:
        return list(ex.map(_call, [(fn, it) for it in items], chunksize=chunk))
