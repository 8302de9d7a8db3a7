"""
Discrimination bank: one bounded FIFO queue of pooled instance
representations per prototype.
"""

from __future__ import annotations

from collections import deque
from typing import Mapping

import numpy as np
import structlog

from protoguard.core.errors import ContractError, DimensionError

logger = structlog.get_logger(__name__)


class DiscriminationBank:
    """``M`` queues of at most ``capacity`` detached ``D``-vectors.

    Each entry is tagged with the id of the batch that produced it, so
    eviction order can be checked from the outside. Batch ids must strictly
    increase between updates, which keeps one entry per prototype per batch.
    """

    def __init__(self, prototypes: int, capacity: int = 10, dim: int = 128) -> None:
        if prototypes < 1 or capacity < 1:
            raise ContractError("bank needs >= 1 prototype and capacity >= 1")
        self.capacity = capacity
        self.dim = dim
        self._queues: list[deque[tuple[int, np.ndarray]]] = [
            deque(maxlen=capacity) for _ in range(prototypes)
        ]
        self.last_batch: int | None = None

    def __len__(self) -> int:
        return len(self._queues)

    def update(self, features: np.ndarray, assignments: np.ndarray, batch_id: int) -> list[int]:
        """Average-pool each prototype's members of this batch and enqueue the result.

        Returns the prototype ids that received an entry.
        """
        features = np.asarray(features, dtype=np.float64)
        assignments = np.asarray(assignments, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise DimensionError(f"bank expects [B, {self.dim}] features", features.shape)
        if assignments.shape != (features.shape[0],):
            raise DimensionError("one assignment per feature", assignments.shape, features.shape)
        if assignments.size and (assignments.min() < 0 or assignments.max() >= len(self)):
            raise ContractError(f"assignment outside 0..{len(self) - 1}")
        if self.last_batch is not None and batch_id <= self.last_batch:
            raise ContractError(f"batch {batch_id} is not newer than the last batch {self.last_batch}")
        self.last_batch = int(batch_id)

        touched = []
        for m in np.unique(assignments):
            pooled = features[assignments == m].mean(axis=0)
            norm = np.linalg.norm(pooled)
            if norm > 0:
                pooled = pooled / norm
            self._queues[int(m)].append((int(batch_id), pooled))
            touched.append(int(m))
        return touched

    def contrastive_set(self, prototype: int) -> np.ndarray:
        """Contents of one queue, oldest first, as ``[k, D]`` (``k`` may be 0)."""
        queue = self._queues[prototype]
        if not queue:
            return np.zeros((0, self.dim))
        return np.stack([vector for _, vector in queue])

    def tags(self, prototype: int) -> list[int]:
        return [tag for tag, _ in self._queues[prototype]]

    def snapshot(self) -> list[np.ndarray]:
        """Copy of every queue, taken before a step mutates the bank."""
        return [self.contrastive_set(m).copy() for m in range(len(self))]

    def occupancy(self) -> list[int]:
        return [len(queue) for queue in self._queues]

    def reset(self) -> None:
        for queue in self._queues:
            queue.clear()
        self.last_batch = None

    def state_entries(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for m, queue in enumerate(self._queues):
            for slot, (_, vector) in enumerate(queue):
                entries[f"bank.{m}.{slot}"] = vector.astype(np.float32)
            entries[f"bank.{m}.tags"] = np.asarray(self.tags(m), dtype=np.float64)
        return entries

    @classmethod
    def from_entries(
        cls, entries: Mapping[str, np.ndarray], capacity: int = 10, dim: int = 128
    ) -> "DiscriminationBank":
        prototypes = sum(1 for name in entries if name.startswith("bank.") and name.endswith(".tags"))
        if prototypes == 0:
            raise ContractError("checkpoint holds no bank")
        bank = cls(prototypes, capacity=capacity, dim=dim)
        for m in range(prototypes):
            for slot, tag in enumerate(entries[f"bank.{m}.tags"]):
                vector = np.asarray(entries[f"bank.{m}.{slot}"], dtype=np.float64)
                bank._queues[m].append((int(tag), vector))
        tags = [tag for queue in bank._queues for tag, _ in queue]
        bank.last_batch = max(tags) if tags else None
        return bank


def bank_update(
    bank: DiscriminationBank, features: np.ndarray, assignments: np.ndarray, batch_id: int
) -> DiscriminationBank:
    bank.update(features, assignments, batch_id)
    return bank


class NegativeQueue:
    """FIFO of momentum features used as InfoNCE negatives."""

    def __init__(self, capacity: int, dim: int) -> None:
        if capacity < 1:
            raise ContractError("negative queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._entries: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, features: np.ndarray) -> None:
        for row in np.asarray(features, dtype=np.float64).reshape(-1, self.dim):
            self._entries.append(row)

    def snapshot(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, self.dim))
        return np.stack(list(self._entries))

    def reset(self) -> None:
        self._entries.clear()
