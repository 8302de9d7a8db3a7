"""
Neural-network primitives built on the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from protoguard.core.errors import DegenerateInputError, DimensionError
from protoguard.tensor import ops
from protoguard.tensor.tensor import Function, Tensor, as_tensor

L2_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Softmax(Function):
    name = "softmax"

    def forward(self, x: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"]
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        out = shifted / shifted.sum(axis=axis, keepdims=True)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out, axis = self.saved["out"], self.attrs["axis"]
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"]
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out, axis = self.saved["out"], self.attrs["axis"]
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


class LogSumExp(Function):
    name = "logsumexp"

    def forward(self, x: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"]
        peak = x.max(axis=axis, keepdims=True)
        weights = np.exp(x - peak)
        total = weights.sum(axis=axis, keepdims=True)
        self.saved["softmax"] = weights / total
        return np.squeeze(peak + np.log(total), axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        axis = self.attrs["axis"]
        return (np.expand_dims(grad, axis) * self.saved["softmax"],)


class L2Normalize(Function):
    name = "l2_normalize"

    def forward(self, v: np.ndarray) -> np.ndarray:
        norms = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        if np.any(norms <= self.attrs["eps"]):
            raise DegenerateInputError(
                f"l2_normalize: {int((norms <= self.attrs['eps']).sum())} vector(s) "
                f"with norm <= {self.attrs['eps']}"
            )
        out = v / norms
        self.saved["out"], self.saved["norms"] = out, norms
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out, norms = self.saved["out"], self.saved["norms"]
        return ((grad - out * (grad * out).sum(axis=-1, keepdims=True)) / norms,)


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    return LogSumExp.apply(x, axis=axis)


def l2_normalize(v: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale every vector along the last axis to unit length."""
    return L2Normalize.apply(v, eps=eps)


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy: logits/labels mismatch", logits.shape, labels.shape)
    picked = log_softmax(logits, axis=1)[np.arange(labels.shape[0]), labels]
    total = -ops.sum(picked)
    return total * (1.0 / labels.shape[0]) if reduction == "mean" else total


# Batch normalization -------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    num_batches: int = field(default=0)


def _channel_view(array: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = array.shape[0]
    return array.reshape(shape)


class BatchNormTrain(Function):
    name = "batch_norm"

    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
        axis, eps = self.attrs["axis"], self.attrs["eps"]
        reduce = tuple(i for i in range(x.ndim) if i != axis)
        mean = x.mean(axis=reduce, keepdims=True)
        var = x.var(axis=reduce, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        self.saved.update(xhat=xhat, inv_std=inv_std, gamma=gamma, reduce=reduce)
        return _channel_view(gamma, x.ndim, axis) * xhat + _channel_view(beta, x.ndim, axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xhat, inv_std = self.saved["xhat"], self.saved["inv_std"]
        gamma, reduce = self.saved["gamma"], self.saved["reduce"]
        dxhat = grad * _channel_view(gamma, grad.ndim, self.attrs["axis"])
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=reduce, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=reduce, keepdims=True)
        )
        return dx, (grad * xhat).sum(axis=reduce), grad.sum(axis=reduce)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    axis: int = 1,
) -> Tensor:
    """Normalize ``x`` per channel along ``axis``.

    Training mode uses batch statistics and folds them into the running
    estimates; when only one value per channel is available it falls back to
    the running estimates.
    """
    if x.shape[axis] != state.running_mean.shape[0]:
        raise DimensionError(
            "batch_norm: channel count differs", x.shape, state.running_mean.shape
        )
    reduce = tuple(i for i in range(x.ndim) if i != axis)
    count = int(np.prod([x.shape[i] for i in reduce]))

    if training and count > 1:
        out = BatchNormTrain.apply(x, gamma, beta, axis=axis, eps=state.eps)
        data = x.data
        batch_mean = data.mean(axis=reduce)
        batch_var = data.var(axis=reduce) * (count / (count - 1))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * batch_mean).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1 - m) * state.running_var + m * batch_var).astype(
            state.running_var.dtype
        )
        state.num_batches += 1
        return out

    dtype = x.dtype
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    scale = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dtype).reshape(shape)
    shift = state.running_mean.astype(dtype).reshape(shape)
    normalized = (x - as_tensor(shift, dtype=dtype)) * as_tensor(scale, dtype=dtype)
    return normalized * ops.reshape(gamma, shape) + ops.reshape(beta, shape)


# Convolution and pooling -----------------------------------------------------


class Conv1d(Function):
    name = "conv1d"

    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        stride, pad = self.attrs["stride"], self.attrs["pad"]
        if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
            raise DimensionError("conv1d: input/kernel channels differ", x.shape, w.shape)
        k = w.shape[2]
        if k > x.shape[2] + 2 * pad:
            raise DimensionError("conv1d: kernel longer than padded input", x.shape, w.shape)
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        windows = sliding_window_view(padded, k, axis=2)[:, :, ::stride, :]
        self.saved.update(windows=windows, w=w, padded_shape=padded.shape)
        return np.einsum("bclk,ock->bol", windows, w, optimize=True)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        windows, w = self.saved["windows"], self.saved["w"]
        stride, pad = self.attrs["stride"], self.attrs["pad"]
        grad_w = np.einsum("bclk,bol->ock", windows, grad, optimize=True)
        grad_windows = np.einsum("bol,ock->bclk", grad, w, optimize=True)
        grad_padded = np.zeros(self.saved["padded_shape"], dtype=grad.dtype)
        span = stride * (grad.shape[2] - 1) + 1
        for j in range(w.shape[2]):
            grad_padded[:, :, j : j + span : stride] += grad_windows[..., j]
        length = grad_padded.shape[2]
        return grad_padded[:, :, pad : length - pad], grad_w


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        stride, pad = self.attrs["stride"], self.attrs["pad"]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise DimensionError("conv2d: input/kernel channels differ", x.shape, w.shape)
        kh, kw = w.shape[2], w.shape[3]
        if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
            raise DimensionError("conv2d: kernel larger than padded input", x.shape, w.shape)
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[
            :, :, ::stride, ::stride
        ]
        self.saved.update(windows=windows, w=w, padded_shape=padded.shape)
        return np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        windows, w = self.saved["windows"], self.saved["w"]
        stride, pad = self.attrs["stride"], self.attrs["pad"]
        grad_w = np.einsum("bchwij,bohw->ocij", windows, grad, optimize=True)
        grad_windows = np.einsum("bohw,ocij->bchwij", grad, w, optimize=True)
        grad_padded = np.zeros(self.saved["padded_shape"], dtype=grad.dtype)
        span_h = stride * (grad.shape[2] - 1) + 1
        span_w = stride * (grad.shape[3] - 1) + 1
        for i in range(w.shape[2]):
            for j in range(w.shape[3]):
                grad_padded[:, :, i : i + span_h : stride, j : j + span_w : stride] += (
                    grad_windows[..., i, j]
                )
        height, width = grad_padded.shape[2], grad_padded.shape[3]
        return grad_padded[:, :, pad : height - pad, pad : width - pad], grad_w


class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        k, stride, pad = self.attrs["kernel"], self.attrs["stride"], self.attrs["pad"]
        padded = np.pad(
            x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf
        )
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = windows.reshape(windows.shape[:4] + (k * k,))
        index = flat.argmax(axis=-1)
        self.saved.update(index=index, padded_shape=padded.shape)
        return np.take_along_axis(flat, index[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        k, stride, pad = self.attrs["kernel"], self.attrs["stride"], self.attrs["pad"]
        index = self.saved["index"]
        grad_padded = np.zeros(self.saved["padded_shape"], dtype=grad.dtype)
        span_h = stride * (grad.shape[2] - 1) + 1
        span_w = stride * (grad.shape[3] - 1) + 1
        zero = np.zeros((), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + span_h : stride, j : j + span_w : stride] += (
                    np.where(index == i * k + j, grad, zero)
                )
        height, width = grad_padded.shape[2], grad_padded.shape[3]
        return (grad_padded[:, :, pad : height - pad, pad : width - pad],)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x[B, C, L]`` with ``w[C_out, C, k]``."""
    return Conv1d.apply(x, w, stride=stride, pad=pad)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, pad=pad)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, pad=pad)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: extent not divisible by {size}", x.shape)
    blocks = ops.reshape(x, (b, c, h // size, size, w // size, size))
    return ops.mean(blocks, axis=(3, 5))
