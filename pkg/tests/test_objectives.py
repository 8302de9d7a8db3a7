"""
Loss terms against hand-computed values.
"""

from __future__ import annotations

import numpy as np
import pytest

from protoguard.core.errors import ConfigurationError, ContractError, DimensionError
from protoguard.services.objectives import (
    concentration,
    icl_loss,
    infonce_loss,
    pce_loss,
    pm_loss,
    pm_terms,
    prototype_negative_mask,
    total_loss,
)
from protoguard.tensor.gradcheck import finite_diff_check
from protoguard.tensor.tensor import Tensor

# -log(e / (e + 1)): one unit-similarity positive against one orthogonal negative at tau = 1
ORTHOGONAL_PAIR = float(np.log1p(np.exp(-1.0)))
E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestPixelMapping:
    def test_single_image_batch_is_zero(self):
        v = Tensor([[0.6, 0.8]])
        assert pm_loss(v, v, tau=0.1).item() == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_rows(self):
        v = Tensor(np.stack([E1, E2]))
        np.testing.assert_allclose(pm_terms(v, v, tau=1.0).data, [ORTHOGONAL_PAIR] * 2, rtol=1e-6)
        assert pm_loss(v, v, tau=1.0).item() == pytest.approx(ORTHOGONAL_PAIR, rel=1e-6)

    def test_views_must_be_row_aligned(self):
        with pytest.raises(DimensionError):
            pm_terms(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), tau=0.1)

    def test_gradient(self, rng):
        v_s = unit_rows(rng, 4, 5)
        error = finite_diff_check(lambda t: pm_loss(t, Tensor(v_s, dtype=t.dtype), 0.5), unit_rows(rng, 4, 5))
        assert error < 1e-4


class TestInfoNCE:
    def test_hand_value(self):
        v = Tensor(E1[None, :])
        loss = infonce_loss(v, E1[None, :], np.array([E2]), tau=1.0)
        assert loss.item() == pytest.approx(ORTHOGONAL_PAIR, rel=1e-6)

    def test_negatives_equal_to_positive_give_log_r_plus_one(self, rng):
        v = unit_rows(rng, 3, 4)
        r = 5
        negatives = np.repeat(v[:, None, :], r, axis=1)
        loss = infonce_loss(Tensor(v), v, negatives, tau=0.1)
        assert loss.item() == pytest.approx(np.log(r + 1), rel=1e-5)

    def test_rejects_bad_negatives_and_temperature(self):
        v = Tensor(np.ones((2, 3)))
        with pytest.raises(DimensionError):
            infonce_loss(v, np.ones((2, 3)), np.ones((3, 2, 3)), tau=0.1)
        with pytest.raises(ConfigurationError):
            infonce_loss(v, np.ones((2, 3)), np.ones((4, 3)), tau=0.0)


class TestConcentration:
    def test_hand_value(self):
        members = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert concentration(members, np.zeros(2), beta=10) == pytest.approx(2 / (2 * np.log(12)))

    def test_homogeneous_in_scale(self, rng):
        members, prototype = rng.standard_normal((6, 3)), rng.standard_normal(3)
        base = concentration(members, prototype, beta=10)
        assert concentration(3 * members, 3 * prototype, beta=10) == pytest.approx(3 * base)

    def test_decreases_with_beta(self, rng):
        members, prototype = rng.standard_normal((4, 3)), rng.standard_normal(3)
        values = [concentration(members, prototype, beta) for beta in (1, 10, 100)]
        assert values[0] > values[1] > values[2]

    def test_empty_cluster_and_bad_beta(self):
        with pytest.raises(ContractError):
            concentration(np.zeros((0, 2)), np.zeros(2), beta=10)
        with pytest.raises(ConfigurationError):
            concentration(np.ones((1, 2)), np.zeros(2), beta=0)


class TestPrototypeContrast:
    def test_hand_value(self):
        loss = pce_loss(Tensor(E1[None, :]), np.array([0]), np.stack([E1, E2]), np.ones(2))
        assert loss.item() == pytest.approx(ORTHOGONAL_PAIR, rel=1e-6)

    def test_without_positive_in_denominator(self):
        loss = pce_loss(
            Tensor(E1[None, :]), np.array([0]), np.stack([E1, E2]), np.ones(2), include_positive=False
        )
        assert loss.item() == pytest.approx(-1.0, rel=1e-6)

    def test_equal_concentrations_reduce_to_infonce(self, rng, float64):
        v, prototypes = unit_rows(rng, 5, 4), unit_rows(rng, 3, 4)
        assignments = np.array([0, 1, 2, 0, 1])
        tau = 0.2
        negatives = np.stack([np.delete(prototypes, a, axis=0) for a in assignments])
        expected = infonce_loss(Tensor(v), prototypes[assignments], negatives, tau).item()
        actual = pce_loss(Tensor(v), assignments, prototypes, np.full(3, tau)).item()
        assert actual == pytest.approx(expected, rel=1e-10)

    def test_gamma_floor(self):
        args = (Tensor(E1[None, :]), np.array([0]), np.stack([E1, E2]))
        floored = pce_loss(*args, np.zeros(2), gamma_min=0.5).item()
        assert floored == pytest.approx(pce_loss(*args, np.full(2, 0.5)).item())

    def test_negative_mask(self, rng):
        assignments = np.array([0, 3, 3, 1])
        full = prototype_negative_mask(assignments, 5)
        assert not full[np.arange(4), assignments].any()
        assert full.sum(axis=1).tolist() == [4, 4, 4, 4]

        sampled = prototype_negative_mask(assignments, 5, negatives=2, rng=rng)
        assert sampled.sum(axis=1).tolist() == [2, 2, 2, 2]
        assert not sampled[np.arange(4), assignments].any()

    def test_single_prototype_has_no_negatives(self):
        with pytest.raises(ContractError):
            prototype_negative_mask(np.array([0, 0]), 1)

    def test_gradient(self, rng):
        prototypes = unit_rows(rng, 3, 4)
        assignments = np.array([2, 0, 1])

        def f(t: Tensor) -> Tensor:
            return pce_loss(t, assignments, prototypes, np.array([0.3, 0.5, 0.8]))

        assert finite_diff_check(f, unit_rows(rng, 3, 4)) < 1e-4


class TestInstanceContrast:
    def test_singleton_set_is_zero(self):
        result = icl_loss(Tensor(E1[None, :]), [E1[None, :]], [0], E1[None, :], np.ones(1))
        assert result.loss.item() == pytest.approx(0.0, abs=1e-7)
        assert result.skipped == 0

    def test_two_member_hand_value(self):
        result = icl_loss(Tensor(E1[None, :]), [np.stack([E1, E2])], [0], E1[None, :], np.ones(1))
        assert result.loss.item() == pytest.approx(ORTHOGONAL_PAIR, rel=1e-6)

    def test_empty_sets_are_skipped(self):
        v = Tensor(np.stack([E1, E2]))
        result = icl_loss(v, [np.zeros((0, 2)), np.zeros((0, 2))], [0, 0], np.stack([E1, E2]), np.ones(2))
        assert result.skipped == 2
        assert result.loss.item() == 0.0

        partial = icl_loss(v, [np.stack([E1, E2]), np.zeros((0, 2))], [0, 0], np.stack([E1, E2]), np.ones(2))
        assert partial.skipped == 1
        assert partial.loss.item() == pytest.approx(ORTHOGONAL_PAIR, rel=1e-6)

    def test_contract_violations(self):
        v = Tensor(E1[None, :])
        with pytest.raises(ContractError):
            icl_loss(v, [E1[None, :]], [1], E1[None, :], np.ones(1))
        with pytest.raises(ContractError):
            icl_loss(v, [E1[None, :]], [0], E1[None, :], np.zeros(1))
        with pytest.raises(ContractError):
            icl_loss(v, [], [], E1[None, :], np.ones(1))

    def test_gradient(self, rng):
        sets = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4))]
        anchor_prototypes = unit_rows(rng, 2, 4)

        def f(t: Tensor) -> Tensor:
            return icl_loss(t, sets, [1, 0], anchor_prototypes, np.array([0.4, 0.7])).loss

        assert finite_diff_check(f, rng.standard_normal((2, 4))) < 1e-4


class TestTotal:
    def test_weighted_sum(self):
        assert total_loss(1.0, 2.0, 3.0, 1.0, 1.0) == 6.0
        assert total_loss(1.0, 2.0, 3.0, 0.5, 0.0) == 2.0

    def test_tensors(self):
        out = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), 1.0, 1.0)
        assert out.item() == pytest.approx(6.0)

    def test_inactive_terms_as_floats(self):
        pm = Tensor(1.5, requires_grad=True)
        icl = Tensor(2.0, requires_grad=True)
        out = total_loss(pm, 0.0, icl, 1.0, 0.5)
        out.backward()

        assert out.item() == pytest.approx(2.5)
        assert pm.grad == pytest.approx(1.0)
        assert icl.grad == pytest.approx(0.5)

    def test_temperature_must_be_positive(self):
        v = Tensor(np.eye(2))
        with pytest.raises(ConfigurationError):
            pm_terms(v, v, tau=-0.1)
