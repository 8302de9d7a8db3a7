"""
Tensor core: primitives, reverse mode, tape replay, reduction order and
the .ten container.
"""

from __future__ import annotations

import struct

import numpy as np
import pytest

from protoguard.core.errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
)
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.functional import BatchNormState
from protoguard.tensor.gradcheck import finite_diff_check
from protoguard.tensor.parallel import WorkerPool, tree_reduce
from protoguard.tensor.serialization import (
    TEN_MAGIC,
    decode_tensor,
    encode_tensor,
    load_tensor,
    save_tensor,
)
from protoguard.tensor.tensor import Tape, Tensor, default_dtype, no_grad, precision


class TestPrimitives:
    """Forward values against hand arithmetic."""

    def test_matmul_identity_and_hand_product(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(ops.matmul(eye, eye).data, np.eye(2))
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\) vs \(2, 3\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax_uniform_and_stable(self):
        np.testing.assert_allclose(F.softmax_axis(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, atol=1e-7)
        np.testing.assert_allclose(F.softmax_axis(Tensor([1000.0, 1000.0]), 0).data, [0.5, 0.5])

    def test_softmax_matches_float64_reference(self):
        x = np.array([1.0, 2.0, 3.0])
        reference = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(F.softmax_axis(Tensor(x), 0).data, reference, atol=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        out = F.softmax_axis(Tensor(rng.standard_normal((5, 7)) * 20), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out > 0)

    def test_l2_normalize(self):
        np.testing.assert_allclose(F.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-6)
        np.testing.assert_allclose(F.l2_normalize(Tensor([0.0, 1.0])).data, [0.0, 1.0])

    def test_l2_normalize_rejects_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            F.l2_normalize(Tensor(np.zeros((2, 3))))

    def test_conv1d_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5))
        kernel = np.eye(3)[:, :, None]
        np.testing.assert_allclose(F.conv1d(Tensor(x), Tensor(kernel)).data, x, atol=1e-6)

    def test_conv1d_box_kernel_on_ramp(self):
        x = Tensor(np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 1, 4))
        out = F.conv1d(x, Tensor(np.ones((1, 1, 3))), stride=1, pad=1)
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 3.0, 6.0, 5.0])

    def test_conv1d_invalid_geometry(self):
        with pytest.raises(DimensionError):
            F.conv1d(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 5))))

    def test_batch_norm_constant_input_is_zero(self):
        state = BatchNormState(np.zeros(2), np.ones(2))
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        out = F.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_batch_norm_train_moments_and_shift(self, rng, float64):
        x = rng.standard_normal((16, 3, 4, 4)) * 3 + 2
        state = BatchNormState(np.zeros(3), np.ones(3))
        out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.full(3, 5.0)), state, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 5.0, atol=1e-3)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert state.num_batches == 1
        assert not np.allclose(state.running_mean, 0.0)

    def test_batch_norm_single_value_falls_back_to_running_stats(self):
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        out = F.batch_norm(Tensor([[3.0]]), Tensor([1.0]), Tensor([0.0]), state, True)
        np.testing.assert_allclose(out.data, [[(3.0 - 1.0) / np.sqrt(4.0 + 1e-5)]], rtol=1e-5)
        assert state.num_batches == 0


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_norm_gives_twice_x(self, rng, float64):
        data = rng.standard_normal(5)
        x = Tensor(data, requires_grad=True)
        ops.sum(x * x).backward()
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_non_scalar_loss_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_leaf_off_path_gets_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        ops.sum(x).backward(inputs=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_gradients_accumulate_across_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        ops.sum(x).backward()
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.node is None

    def test_precision_switches_default_dtype(self):
        assert default_dtype() == np.float32
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


class TestFiniteDifferences:
    def test_linear_function_is_exact(self, rng):
        c = rng.standard_normal(6)
        error = finite_diff_check(lambda t: ops.sum(t * Tensor(c, dtype=t.dtype)), rng.standard_normal(6))
        assert error < 1e-7

    def test_softmax_cross_entropy(self, rng):
        labels = np.array([0, 2, 1])
        error = finite_diff_check(lambda t: F.cross_entropy(t, labels), rng.standard_normal((3, 4)))
        assert error < 1e-5

    @pytest.mark.parametrize("shape", [(3, 4), (2, 5), (6, 2)])
    def test_matmul_random_shapes(self, rng, shape):
        other = rng.standard_normal((shape[1], 2))

        def f(t: Tensor) -> Tensor:
            y = ops.matmul(t, Tensor(other, dtype=t.dtype))
            return ops.sum(y * y)

        error = finite_diff_check(f, rng.standard_normal(shape))
        assert error < 1e-4

    def test_scalar_function_required(self, rng):
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: t * 2.0, rng.standard_normal(3))


class TestTape:
    def test_topological_order(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        loss = ops.sum(ops.relu(ops.matmul(x, w)))
        tape = Tape.record(loss)
        produced = {id(leaf) for leaf in tape.leaves}
        for entry in tape.entries:
            assert all(id(t) in produced for t in entry.inputs)
            produced.add(id(entry.output))
        assert tape.entries[-1].output is loss

    def test_replay_is_bit_identical(self, rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        loss = ops.sum(F.softmax_axis(ops.tanh(x), axis=1) * Tensor(rng.standard_normal((4, 5))))
        tape = Tape.record(loss)
        recorded = [entry.output.data for entry in tape.entries]
        for original, replayed in zip(recorded, tape.replay()):
            np.testing.assert_array_equal(original, replayed)

    def test_forward_backward_is_deterministic(self, rng):
        data = rng.standard_normal((3, 8))

        def run() -> np.ndarray:
            x = Tensor(data, requires_grad=True)
            ops.sum(F.log_softmax(x * x, axis=1)).backward()
            return x.grad

        np.testing.assert_array_equal(run(), run())


class TestParallel:
    def test_tree_reduce_pairs_in_fixed_order(self):
        values = [np.array([1e16]), np.array([1.0]), np.array([-1e16]), np.array([1.0])]
        # ((a + b) + (c + d)) loses both ones; a left fold would keep one
        np.testing.assert_array_equal(tree_reduce(values), [0.0])

    def test_tree_reduce_empty(self):
        with pytest.raises(ContractError):
            tree_reduce([])

    def test_pool_preserves_order(self):
        with WorkerPool(3) as pool:
            assert pool.map(lambda v: v * v, range(10)) == [v * v for v in range(10)]

    def test_pool_rejects_zero_workers(self):
        with pytest.raises(ContractError):
            WorkerPool(0)


class TestTenFormat:
    def test_header_layout(self):
        array = np.arange(6, dtype=np.float32).reshape(2, 3)
        raw = encode_tensor(array)
        assert raw[:4] == TEN_MAGIC
        assert raw[4:6] == bytes([0, 2])
        assert struct.unpack("<2Q", raw[6:22]) == (2, 3)
        assert raw[22:] == array.astype("<f4").tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        array = rng.standard_normal((3, 2, 4)).astype(np.float32)
        save_tensor(tmp_path / "x.ten", array)
        loaded = load_tensor(tmp_path / "x.ten")
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, array)

    def test_decode_returns_next_offset(self):
        first, second = encode_tensor(np.ones(2, np.float32)), encode_tensor(np.zeros(3, np.float64))
        array, cursor = decode_tensor(first + second)
        assert cursor == len(first)
        array, cursor = decode_tensor(first + second, cursor)
        assert array.dtype == np.float64 and cursor == len(first) + len(second)

    def test_rejects_bad_magic_and_dtype(self):
        with pytest.raises(ContractError):
            decode_tensor(b"XXXX" + bytes(10))
        with pytest.raises(ConfigurationError):
            encode_tensor(np.ones(2, dtype=np.int32))

    def test_truncated_payload(self):
        raw = encode_tensor(np.ones(4, dtype=np.float32))
        with pytest.raises(ContractError):
            decode_tensor(raw[:-1])
