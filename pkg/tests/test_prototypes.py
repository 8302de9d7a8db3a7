"""
Density-peak prototypes and nearest-prototype assignment.
"""

from __future__ import annotations

import numpy as np
import pytest

from protoguard.core.errors import ContractError, DimensionError
from protoguard.schemas.config import BankConfig, LossConfig
from protoguard.services.objectives import concentration
from protoguard.services.prototypes import PrototypeSet, assign, build_prototypes, density_peaks


def brute_force_peaks(points: np.ndarray, m: int, d_c: float) -> list[int]:
    n = len(points)
    dist = [[float(np.linalg.norm(points[i] - points[j])) for j in range(n)] for i in range(n)]
    rho = [sum(1 for j in range(n) if j != i and dist[i][j] < d_c) for i in range(n)]
    ranked = sorted(range(n), key=lambda i: (-rho[i], i))
    delta = {}
    for rank, i in enumerate(ranked):
        denser = ranked[:rank]
        delta[i] = min(dist[i][j] for j in denser) if denser else max(dist[i])
    by_score = sorted(range(n), key=lambda i: (-rho[i] * delta[i], i))
    return sorted(by_score[:m])


def two_blobs(rng: np.random.Generator, per_blob: int = 5) -> np.ndarray:
    first = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((per_blob, 3))
    second = np.array([0.0, 1.0, 0.0]) + 0.05 * rng.standard_normal((per_blob, 3))
    return np.vstack([first, second])


class TestDensityPeaks:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        points = rng.standard_normal((12, 4))
        result = density_peaks(points, 3, d_c=1.5)
        assert result.peaks.tolist() == brute_force_peaks(points, 3, 1.5)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            n = int(rng.integers(2, 65))
            m = int(rng.integers(1, n + 1))
            points = rng.standard_normal((n, 3))
            d_c = float(rng.uniform(0.3, 2.0))
            assert density_peaks(points, m, d_c=d_c).peaks.tolist() == brute_force_peaks(points, m, d_c)

    def test_two_blobs_get_one_peak_each(self, rng):
        result = density_peaks(two_blobs(rng), 2, d_c=0.5)
        assert result.peaks.tolist() == [0, 5]
        assert result.assignments.tolist() == [0] * 5 + [1] * 5
        np.testing.assert_array_equal(result.rho, 4)

    def test_every_point_a_peak(self, rng):
        points = rng.standard_normal((6, 3))
        result = density_peaks(points, 6)
        assert result.peaks.tolist() == list(range(6))
        assert result.assignments.tolist() == list(range(6))

    def test_single_point(self):
        result = density_peaks(np.array([[0.6, 0.8]]), 1)
        assert result.peaks.tolist() == [0]
        assert result.assignments.tolist() == [0]

    def test_prototype_count_bounds(self, rng):
        with pytest.raises(ContractError):
            density_peaks(rng.standard_normal((3, 2)), 4)
        with pytest.raises(ContractError):
            density_peaks(rng.standard_normal((3, 2)), 0)

    def test_estimated_radius_is_positive(self, rng):
        assert density_peaks(rng.standard_normal((50, 4)), 5).radius > 0


class TestAssign:
    def test_matches_exhaustive_scan(self, rng):
        embeddings, centroids = rng.standard_normal((20, 5)), rng.standard_normal((4, 5))
        expected = []
        for e in embeddings:
            sims = [e @ c / (np.linalg.norm(e) * np.linalg.norm(c)) for c in centroids]
            expected.append(int(np.argmax(sims)))
        assert assign(embeddings, centroids).tolist() == expected

    def test_ties_go_to_lowest_id(self):
        centroids = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 1.0]])
        assert assign(np.array([[2.0, 2.0]]), centroids).tolist() == [0]

    def test_single_vector_gives_scalar(self):
        out = assign(np.array([0.0, 1.0]), np.eye(2))
        assert out.ndim == 0 and int(out) == 1

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            assign(np.ones((2, 3)), np.ones((2, 4)))


class TestBuildPrototypes:
    def test_two_blobs(self, rng):
        features = two_blobs(rng)
        features /= np.linalg.norm(features, axis=1, keepdims=True)
        # a radius between the within-blob and cross-blob distances
        bank = BankConfig(prototypes=2, density_fraction=0.4)
        protos, assignments = build_prototypes(features, bank, LossConfig())

        assert len(protos) == 2 and protos.dim == 3
        np.testing.assert_allclose(np.linalg.norm(protos.centroids, axis=1), 1.0)
        assert protos.member_counts.tolist() == [5, 5]
        assert sorted(assignments.tolist()) == [0] * 5 + [1] * 5
        for k in range(2):
            members = features[assignments == k]
            expected = max(concentration(members, protos.centroids[k], 10.0), 1e-3)
            assert protos.gammas[k] == pytest.approx(expected)

    def test_gamma_floor(self):
        features = np.tile([[1.0, 0.0]], (4, 1))
        protos, _ = build_prototypes(features, BankConfig(prototypes=1), LossConfig(gamma_min=0.25))
        assert protos.gammas.tolist() == [0.25]

    def test_fewer_features_than_prototypes(self, rng):
        features = rng.standard_normal((4, 3))
        protos, _ = build_prototypes(features, BankConfig(prototypes=10), LossConfig())
        assert len(protos) == 4

    def test_entries_round_trip(self, rng):
        protos, _ = build_prototypes(rng.standard_normal((8, 3)), BankConfig(prototypes=3), LossConfig())
        restored = PrototypeSet.from_entries(protos.state_entries())
        np.testing.assert_allclose(restored.centroids, protos.centroids, rtol=1e-6)
        np.testing.assert_allclose(restored.gammas, protos.gammas, rtol=1e-6)
        assert restored.member_counts.tolist() == protos.member_counts.tolist()

    def test_similarities_and_validation(self):
        protos = PrototypeSet(np.eye(2), np.ones(2), np.ones(2, dtype=np.int64))
        np.testing.assert_allclose(protos.similarities(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
        with pytest.raises(DimensionError):
            PrototypeSet(np.eye(2), np.ones(3), np.ones(2))
        with pytest.raises(ContractError):
            PrototypeSet.from_entries({})
