"""
Convolution, batch-norm and linear layers.
"""

from __future__ import annotations

import numpy as np

from protoguard.models.module import Module, Parameter
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.tensor import Tensor, default_dtype


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(default_dtype())


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int | None = None,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel)
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, stride=self.stride, pad=self.pad)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.pad = kernel // 2
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, kernel), in_channels * kernel)
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, stride=1, pad=self.pad)


class BatchNorm(Module):
    """Batch normalization over ``axis`` (channels by default)."""

    def __init__(self, channels: int, axis: int = 1, zero_init: bool = False) -> None:
        super().__init__()
        self.axis = axis
        dtype = default_dtype()
        self.gamma = Parameter(
            np.zeros(channels, dtype=dtype) if zero_init else np.ones(channels, dtype=dtype),
            decay=False,
        )
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        state = F.BatchNormState(self.running_mean, self.running_var)
        out = F.batch_norm(x, self.gamma, self.beta, state, self.training, axis=self.axis)
        self.running_mean = state.running_mean
        self.running_var = state.running_var
        return out


class Linear(Module):
    def __init__(
        self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True
    ) -> None:
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(in_features, out_features)).astype(default_dtype())
        )
        self.bias = (
            Parameter(np.zeros(out_features, dtype=default_dtype()), decay=False) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out
