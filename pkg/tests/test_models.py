"""
Axial attention, PAA blocks, the encoder family and the linear probe.
"""

from __future__ import annotations

import numpy as np
import pytest

from protoguard.core.errors import ConfigurationError, ContractError, DimensionError
from protoguard.models.attention import AxialAttention
from protoguard.models.blocks import ConvBottleneck, PAABlock, PAABlockConfig
from protoguard.models.encoder import VARIANTS, PAAResNet, build_encoder, encode, momentum_encoder_update
from protoguard.models.module import Parameter
from protoguard.models.probe import ProbeClassifier, train_probe
from protoguard.schemas.enums import AttentionLayout, Axis, Mode, VariantName
from protoguard.tensor import ops
from protoguard.tensor.gradcheck import finite_diff_check
from protoguard.tensor.parallel import WorkerPool, use_branch_pool
from protoguard.tensor.tensor import Tensor, no_grad, precision

BN_SCALE = 1.0 / np.sqrt(1.0 + 1e-5)


def naive_axial(attention: AxialAttention, x: np.ndarray) -> np.ndarray:
    """Double-loop reference of eval-mode axial attention with fresh batch norms."""
    heads, d, length = attention.heads, attention.head_dim, attention.length
    wq, wk, wv = (np.asarray(p.data, dtype=np.float64) for p in (attention.w_q, attention.w_k, attention.w_v))
    rq, rk, rv = (np.asarray(p.data, dtype=np.float64) for p in (attention.r_q, attention.r_k, attention.r_v))
    height = attention.axis == Axis.HEIGHT
    b_count, channels, h_count, w_count = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(b_count):
        for other in range(w_count if height else h_count):
            line = x[b, :, :, other] if height else x[b, :, other, :]
            q = (wq @ line).reshape(heads, d, length)
            k = (wk @ line).reshape(heads, d, length)
            v = (wv @ line).reshape(heads, d, length)
            result = np.zeros((heads, d, length))
            for h in range(heads):
                logits = np.empty((length, length))
                for i in range(length):
                    for j in range(length):
                        off = i - j + length - 1
                        qi, kj = q[h, :, i], k[h, :, j]
                        logits[i, j] = qi @ kj + qi @ rq[:, off] + kj @ rk[:, off]
                logits *= BN_SCALE
                weights = np.exp(logits - logits.max(axis=1, keepdims=True))
                weights /= weights.sum(axis=1, keepdims=True)
                for i in range(length):
                    for j in range(length):
                        result[h, :, i] += weights[i, j] * (v[h, :, j] + rv[:, i - j + length - 1])
            block = result.reshape(channels, length) * BN_SCALE
            if height:
                out[b, :, :, other] = block
            else:
                out[b, :, other, :] = block
    return out


class TestAxialAttention:
    @pytest.mark.parametrize("axis", [Axis.HEIGHT, Axis.WIDTH])
    def test_matches_naive_reference(self, axis):
        with precision("float64"):
            for seed in range(10):
                rng = np.random.default_rng(seed)
                attention = AxialAttention(4, 3, axis, rng, heads=2)
                attention.eval()
                x = rng.standard_normal((1, 4, 3, 3))
                with no_grad():
                    fast = attention(Tensor(x)).data
                np.testing.assert_allclose(fast, naive_axial(attention, x), atol=1e-5)

    def test_weights_sum_to_one(self, rng):
        attention = AxialAttention(8, 5, Axis.WIDTH, rng, heads=4)
        x = Tensor(rng.standard_normal((2, 8, 3, 5)))
        with no_grad():
            weights, _ = attention.attention_weights(attention.to_lines(x))
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_zero_queries_and_keys_attend_uniformly(self, rng):
        attention = AxialAttention(4, 4, Axis.HEIGHT, rng, heads=2)
        for param in (attention.w_q, attention.w_k, attention.r_q, attention.r_k):
            param.data = np.zeros_like(param.data)
        attention.eval()
        with no_grad():
            lines = attention.to_lines(Tensor(rng.standard_normal((1, 4, 4, 2))))
            weights, _ = attention.attention_weights(lines)
        np.testing.assert_allclose(weights.data, 0.25, atol=1e-7)

    def test_singleton_axis(self, float64, rng):
        attention = AxialAttention(4, 1, Axis.WIDTH, rng, heads=2)
        attention.eval()
        x = rng.standard_normal((1, 4, 2, 1))
        with no_grad():
            out = attention(Tensor(x)).data
        v = np.einsum("oc,bchw->bohw", attention.w_v.data, x)
        offset = np.tile(attention.r_v.data[:, 0], attention.heads)
        expected = (v + offset[None, :, None, None]) * BN_SCALE
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_heads_must_divide_channels(self, rng):
        with pytest.raises(ConfigurationError):
            AxialAttention(6, 4, Axis.HEIGHT, rng, heads=4)

    def test_wrong_axis_length(self, rng):
        attention = AxialAttention(4, 4, Axis.HEIGHT, rng, heads=2)
        with pytest.raises(DimensionError):
            attention(Tensor(np.zeros((1, 4, 5, 4))))


class TestPAABlock:
    def test_parallel_equals_sequential(self, rng):
        block = PAABlock(PAABlockConfig(16, 4, 16, 1, 6, 6, heads=2), rng)
        block.eval()
        x = Tensor(rng.standard_normal((2, 16, 6, 6)))
        with no_grad():
            with use_branch_pool(None):
                sequential = block(x).data
            with WorkerPool(2) as pool, use_branch_pool(pool):
                concurrent = block(x).data
        np.testing.assert_array_equal(sequential, concurrent)

    def test_zero_initialized_residual_is_identity(self, rng):
        block = PAABlock(PAABlockConfig(8, 2, 8, 1, 4, 4, heads=2), rng, zero_init_residual=True)
        x = np.abs(rng.standard_normal((2, 8, 4, 4)))
        with no_grad():
            out = block(Tensor(x)).data
        np.testing.assert_allclose(out, x, atol=1e-6)

    @pytest.mark.parametrize("layout", list(AttentionLayout))
    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_shape(self, rng, layout, stride):
        block = PAABlock(PAABlockConfig(8, 4, 16, stride, 4, 4, heads=2), rng, layout=layout)
        with no_grad():
            out = block(Tensor(rng.standard_normal((3, 8, 4, 4))))
        assert out.shape == (3, 16, 4 // stride, 4 // stride)

    def test_gradient_matches_finite_differences(self, rng):
        with precision("float64"):
            block = PAABlock(PAABlockConfig(8, 2, 8, 1, 3, 3, heads=2), rng)
            block.eval()
        error = finite_diff_check(lambda t: ops.sum(block(t)), rng.standard_normal((1, 8, 3, 3)))
        assert error < 1e-3

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            PAABlockConfig(8, 4, 8, 1, 4, 4)
        with pytest.raises(ConfigurationError):
            PAABlockConfig(8, 2, 8, 3, 4, 4)
        with pytest.raises(ConfigurationError):
            PAABlockConfig(8, 2, 8, 2, 5, 5)

    def test_input_must_match_config(self, rng):
        block = PAABlock(PAABlockConfig(8, 2, 8, 1, 4, 4, heads=2), rng)
        with pytest.raises(DimensionError):
            block(Tensor(np.zeros((1, 8, 5, 5))))


class TestEncoder:
    def test_embeddings_are_unit_norm(self, encoder, rng):
        with no_grad():
            v = encoder(Tensor(rng.uniform(0, 1, (3, 3, 8, 8)))).data
        assert v.shape == (3, 16)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-5)

    def test_identical_inputs_identical_embeddings(self, encoder, rng):
        image = rng.uniform(0, 1, (1, 3, 8, 8))
        with no_grad():
            v = encode(encoder, np.concatenate([image, image, rng.uniform(0, 1, (2, 3, 8, 8))])).data
        np.testing.assert_array_equal(v[0], v[1])

    def test_encode_restores_mode(self, encoder, rng):
        encoder.train()
        with no_grad():
            encode(encoder, rng.uniform(0, 1, (2, 3, 8, 8)), mode=Mode.EVAL)
        assert encoder.training

    def test_wrong_spatial_size(self, encoder):
        with pytest.raises(DimensionError):
            encoder(Tensor(np.zeros((1, 3, 16, 16))))

    def test_image_size_must_divide_reduction(self, rng):
        with pytest.raises(ConfigurationError):
            PAAResNet(VARIANTS[VariantName.XS], 10, rng)

    def test_last_blocks_are_paa(self, config):
        encoder = build_encoder(config.train)
        blocks = [block for stage in encoder.stages() for block in stage._modules.values()]
        kinds = [type(block) for block in blocks]
        assert kinds == [ConvBottleneck, ConvBottleneck, PAABlock, PAABlock]

    def test_stacked_layout_and_no_paa(self, make_config, rng):
        stacked = build_encoder(make_config(attention_layout="stacked").train)
        plain = build_encoder(make_config(paa_blocks=0).train)
        x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
        with no_grad():
            assert stacked(x).shape == plain(x).shape == (2, 16)
        assert not any(isinstance(m, PAABlock) for _, m in plain.named_modules())

    def test_parameter_count_is_stable(self, config):
        first, second = build_encoder(config.train), build_encoder(config.train)
        assert first.parameter_count() == second.parameter_count() > 0
        for name, value in first.state_dict().items():
            np.testing.assert_array_equal(value, second.state_dict()[name])

    def test_variant_widths_scale(self):
        small, medium, large = (
            np.array(VARIANTS[v].widths) for v in (VariantName.S, VariantName.M, VariantName.L)
        )
        np.testing.assert_array_equal(medium, small * 1.5)
        np.testing.assert_array_equal(large, small * 2)
        assert VARIANTS[VariantName.S].depths == (3, 4, 6, 3)

    def test_state_dict_round_trip(self, config, encoder, rng):
        other = build_encoder(config.train, seed=99)
        other.load_state_dict(encoder.state_dict())
        other.eval()
        x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
        with no_grad():
            np.testing.assert_array_equal(other(x).data, encoder(x).data)

    def test_load_state_dict_errors(self, encoder):
        state = encoder.state_dict()
        name = next(iter(state))
        with pytest.raises(ContractError):
            encoder.load_state_dict({k: v for k, v in state.items() if k != name})
        with pytest.raises(DimensionError):
            encoder.load_state_dict({**state, name: np.zeros((1, 1))})


class TestMomentumUpdate:
    def test_hand_arithmetic(self):
        online, momentum = [Parameter([0.0])], [Parameter([1.0])]
        momentum_encoder_update(online, momentum, 0.99)
        np.testing.assert_allclose(momentum[0].data, [0.99], rtol=1e-6)

    def test_degenerate_coefficients(self, config):
        online, momentum = build_encoder(config.train, seed=1), build_encoder(config.train, seed=2)
        before = [p.data.copy() for p in momentum.parameters()]
        momentum_encoder_update(online.parameters(), momentum.parameters(), 1.0)
        for value, param in zip(before, momentum.parameters()):
            np.testing.assert_array_equal(param.data, value)
        momentum_encoder_update(online.parameters(), momentum.parameters(), 0.0)
        for src, dst in zip(online.parameters(), momentum.parameters()):
            np.testing.assert_array_equal(dst.data, src.data)

    def test_mismatched_lists(self):
        with pytest.raises(ContractError):
            momentum_encoder_update([Parameter([0.0])], [], 0.5)
        with pytest.raises(ContractError):
            momentum_encoder_update([Parameter([0.0])], [Parameter([0.0, 1.0])], 0.5)


class TestProbe:
    def test_learns_separable_embeddings(self, rng):
        centers = np.eye(4)[:2]
        labels = np.repeat([0, 1], 20)
        embeddings = centers[labels] + 0.05 * rng.standard_normal((40, 4))
        probe = train_probe(embeddings, labels, classes=2, epochs=100, lr=0.5)
        assert np.mean(probe.predict(embeddings) == labels) == 1.0

    def test_classifier_puts_encoder_in_eval_mode(self, encoder, rng):
        encoder.train()
        probe = train_probe(rng.standard_normal((6, 16)), np.array([0, 1] * 3), classes=2, epochs=2)
        classifier = ProbeClassifier(encoder, probe)
        assert not encoder.training
        assert classifier.predict(rng.uniform(0, 1, (2, 3, 8, 8))).shape == (2,)
        assert len(classifier.parameters()) == len(encoder.parameters()) + 2
