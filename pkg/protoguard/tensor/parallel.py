"""
Deterministic reduction and the shared worker pool.
"""

from __future__ import annotations

import contextlib
import contextvars
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np
import structlog

from protoguard.core.errors import ContractError

logger = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def tree_reduce(values: Sequence[np.ndarray]) -> np.ndarray:
    """Sum arrays pairwise in a fixed order.

    The pairing depends only on the number of values, never on which worker
    produced them, so the result is reproducible bit for bit.
    """
    if not values:
        raise ContractError("tree_reduce needs at least one value")
    level = list(values)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


class WorkerPool:
    """Thread pool that preserves submission order and context variables.

    With a single worker every task runs inline on the calling thread.
    """

    def __init__(self, workers: int = 1) -> None:
        if workers < 1:
            raise ContractError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self._executor = (
            ThreadPoolExecutor(max_workers=workers, thread_name_prefix="protoguard")
            if workers > 1
            else None
        )

    def run(self, tasks: Sequence[Callable[[], T]]) -> list[T]:
        if self._executor is None or len(tasks) < 2:
            return [task() for task in tasks]
        futures = [
            self._executor.submit(contextvars.copy_context().run, task) for task in tasks
        ]
        return [future.result() for future in futures]

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        return self.run([lambda item=item: fn(item) for item in items])

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


_BRANCH_POOL: contextvars.ContextVar[WorkerPool | None] = contextvars.ContextVar(
    "branch_pool", default=None
)


def current_branch_pool() -> WorkerPool | None:
    return _BRANCH_POOL.get()


@contextlib.contextmanager
def use_branch_pool(pool: WorkerPool | None) -> Iterator[None]:
    """Run the two PAA branches of every block on ``pool`` inside the block."""
    token = _BRANCH_POOL.set(pool)
    try:
        yield
    finally:
        _BRANCH_POOL.reset(token)


__all__ = ["tree_reduce", "WorkerPool", "current_branch_pool", "use_branch_pool"]
