"""
Discrimination bank queues and the momentum negative queue.
"""

from __future__ import annotations

import numpy as np
import pytest

from protoguard.core.errors import ContractError, DimensionError
from protoguard.services.bank import DiscriminationBank, NegativeQueue, bank_update


class TestDiscriminationBank:
    def test_fifo_eviction_keeps_latest_batches(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=10, dim=3)
        for batch_id in range(1, 12):
            bank.update(rng.standard_normal((1, 3)), np.array([0]), batch_id)
        assert bank.tags(0) == list(range(2, 12))
        assert bank.occupancy() == [10, 0]

    def test_randomized_updates_match_recomputed_means(self, rng):
        bank = DiscriminationBank(prototypes=3, capacity=10, dim=4)
        expected: list[list[tuple[int, np.ndarray]]] = [[], [], []]
        for batch_id in range(10_000):
            size = int(rng.integers(1, 5))
            features = rng.standard_normal((size, 4))
            assignments = rng.integers(0, 3, size=size)
            bank.update(features, assignments, batch_id)
            for m in np.unique(assignments):
                pooled = features[assignments == m].mean(axis=0)
                expected[m] = (expected[m] + [(batch_id, pooled / np.linalg.norm(pooled))])[-10:]
            assert max(bank.occupancy()) <= 10

        for m in range(3):
            assert bank.tags(m) == [tag for tag, _ in expected[m]]
            np.testing.assert_allclose(bank.contrastive_set(m), [row for _, row in expected[m]], atol=1e-6)

    def test_untouched_prototype_is_unchanged(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=4, dim=3)
        bank.update(rng.standard_normal((2, 3)), np.array([0, 0]), 1)
        before = bank.contrastive_set(0).copy()
        touched = bank.update(rng.standard_normal((3, 3)), np.array([1, 1, 1]), 2)
        assert touched == [1]
        np.testing.assert_array_equal(bank.contrastive_set(0), before)
        assert bank.tags(0) == [1]

    def test_entries_are_pooled_and_normalized(self):
        bank = DiscriminationBank(prototypes=1, capacity=2, dim=2)
        bank.update(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]), 0)
        np.testing.assert_allclose(bank.contrastive_set(0), [[np.sqrt(0.5), np.sqrt(0.5)]])

    def test_one_entry_per_prototype_per_batch(self, rng):
        bank = DiscriminationBank(prototypes=3, capacity=5, dim=4)
        bank_update(bank, rng.standard_normal((6, 4)), np.array([0, 2, 2, 0, 0, 2]), 7)
        assert bank.occupancy() == [1, 0, 1]
        assert bank.contrastive_set(1).shape == (0, 4)

    def test_snapshot_is_a_copy(self, rng):
        bank = DiscriminationBank(prototypes=1, capacity=3, dim=2)
        bank.update(rng.standard_normal((1, 2)), np.array([0]), 0)
        snapshot = bank.snapshot()
        bank.update(rng.standard_normal((1, 2)), np.array([0]), 1)
        assert snapshot[0].shape == (1, 2)

    def test_reset(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=3, dim=2)
        bank.update(rng.standard_normal((2, 2)), np.array([0, 1]), 0)
        bank.reset()
        assert bank.occupancy() == [0, 0]

    def test_entries_round_trip(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=3, dim=4)
        for batch_id in range(5):
            bank.update(rng.standard_normal((3, 4)), rng.integers(0, 2, size=3), batch_id)
        restored = DiscriminationBank.from_entries(bank.state_entries(), capacity=3, dim=4)
        for m in range(2):
            assert restored.tags(m) == bank.tags(m)
            np.testing.assert_allclose(restored.contrastive_set(m), bank.contrastive_set(m), rtol=1e-6)

    def test_validation(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=3, dim=4)
        with pytest.raises(DimensionError):
            bank.update(rng.standard_normal((2, 3)), np.array([0, 1]), 0)
        with pytest.raises(DimensionError):
            bank.update(rng.standard_normal((2, 4)), np.array([0]), 0)
        with pytest.raises(ContractError):
            bank.update(rng.standard_normal((1, 4)), np.array([2]), 0)
        with pytest.raises(ContractError):
            DiscriminationBank(prototypes=0)
        with pytest.raises(ContractError):
            DiscriminationBank.from_entries({})

    def test_batch_ids_must_increase(self, rng):
        bank = DiscriminationBank(prototypes=2, capacity=3, dim=4)
        bank.update(rng.standard_normal((2, 4)), np.array([0, 0]), 3)
        for repeated in (3, 2):
            with pytest.raises(ContractError):
                bank.update(rng.standard_normal((2, 4)), np.array([0, 1]), repeated)
        assert bank.tags(0) == [3] and bank.tags(1) == []

        restored = DiscriminationBank.from_entries(bank.state_entries(), capacity=3, dim=4)
        with pytest.raises(ContractError):
            restored.update(rng.standard_normal((1, 4)), np.array([1]), 3)
        restored.update(rng.standard_normal((1, 4)), np.array([1]), 4)
        assert restored.tags(1) == [4]

        bank.reset()
        bank.update(rng.standard_normal((1, 4)), np.array([1]), 0)
        assert bank.tags(1) == [0]


class TestNegativeQueue:
    def test_keeps_most_recent_rows(self):
        queue = NegativeQueue(capacity=3, dim=2)
        queue.push(np.arange(10.0).reshape(5, 2))
        assert len(queue) == 3
        np.testing.assert_array_equal(queue.snapshot(), [[4.0, 5.0], [6.0, 7.0], [8.0, 9.0]])

    def test_empty_and_reset(self):
        queue = NegativeQueue(capacity=2, dim=3)
        assert queue.snapshot().shape == (0, 3)
        queue.push(np.ones((1, 3)))
        queue.reset()
        assert len(queue) == 0
        with pytest.raises(ContractError):
            NegativeQueue(capacity=0, dim=3)
