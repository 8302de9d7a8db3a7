"""
Residual bottleneck blocks: parallel axial attention (PAA) and plain convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from protoguard.core.errors import ConfigurationError, DimensionError
from protoguard.models.attention import AxialAttention
from protoguard.models.layers import BatchNorm, Conv1d, Conv2d
from protoguard.models.module import Module
from protoguard.schemas.enums import AttentionLayout, Axis
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.parallel import current_branch_pool
from protoguard.tensor.tensor import Tensor


@dataclass(frozen=True)
class PAABlockConfig:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int
    height: int
    width: int
    heads: int = 8

    def __post_init__(self) -> None:
        if self.out_channels != 4 * self.bottleneck_channels:
            raise ConfigurationError(
                f"out_channels ({self.out_channels}) must be 4 x bottleneck ({self.bottleneck_channels})"
            )
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and (self.height % 2 or self.width % 2):
            raise ConfigurationError(f"stride 2 needs even extents, got {self.height}x{self.width}")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


class _Shortcut(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride, pad=0)
        self.bn = BatchNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class PAABlock(Module):
    """Bottleneck whose spatial convolution is replaced by axial attention.

    In the parallel layout the height and width branches both read the same
    reduced tensor and may run on two workers; each branch is attention
    followed by a Conv1D shuffle along its axis, and the two results are
    concatenated on channels. The stacked layout applies height then width
    attention in sequence.
    """

    def __init__(
        self,
        cfg: PAABlockConfig,
        rng: np.random.Generator,
        layout: AttentionLayout = AttentionLayout.PARALLEL,
        zero_init_residual: bool = False,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        width = cfg.bottleneck_channels

        self.reduce = Conv2d(cfg.in_channels, width, 1, rng, pad=0)
        self.bn_reduce = BatchNorm(width)
        self.attn_h = AxialAttention(width, cfg.height, Axis.HEIGHT, rng, heads=cfg.heads)
        self.shuffle_h = Conv1d(width, width, 3, rng)
        self.attn_w = AxialAttention(width, cfg.width, Axis.WIDTH, rng, heads=cfg.heads)
        self.shuffle_w = Conv1d(width, width, 3, rng)

        merged = 2 * width if layout == AttentionLayout.PARALLEL else width
        self.bn_merge = BatchNorm(merged)
        self.expand = Conv2d(merged, cfg.out_channels, 1, rng, pad=0)
        self.bn_expand = BatchNorm(cfg.out_channels, zero_init=zero_init_residual)
        self.shortcut = (
            _Shortcut(cfg.in_channels, cfg.out_channels, cfg.stride, rng)
            if cfg.needs_projection
            else None
        )

    def _branch(self, attention: AxialAttention, shuffle: Conv1d, y: Tensor) -> Tensor:
        lines = attention.attend(attention.to_lines(y))
        return attention.from_lines(shuffle(lines), y.shape)

    def branch_height(self, y: Tensor) -> Tensor:
        return self._branch(self.attn_h, self.shuffle_h, y)

    def branch_width(self, y: Tensor) -> Tensor:
        return self._branch(self.attn_w, self.shuffle_w, y)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise DimensionError(
                "PAA block input differs from its configuration",
                x.shape,
                (x.shape[0] if x.ndim else 0, cfg.in_channels, cfg.height, cfg.width),
            )
        y = ops.relu(self.bn_reduce(self.reduce(x)))

        if self.layout == AttentionLayout.PARALLEL:
            tasks = [lambda: self.branch_height(y), lambda: self.branch_width(y)]
            pool = current_branch_pool()
            outputs = pool.run(tasks) if pool is not None else [task() for task in tasks]
            merged = ops.concat(outputs, axis=1)
        else:
            merged = self.branch_width(self.branch_height(y))

        merged = ops.relu(self.bn_merge(merged))
        if cfg.stride == 2:
            merged = F.avg_pool2d(merged, 2)
        out = self.bn_expand(self.expand(merged))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(out + identity)


class ConvBottleneck(Module):
    """ResNet bottleneck: 1x1 reduce, 3x3 (strided) conv, 1x1 expand."""

    def __init__(
        self,
        in_channels: int,
        bottleneck_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.reduce = Conv2d(in_channels, bottleneck_channels, 1, rng, pad=0)
        self.bn_reduce = BatchNorm(bottleneck_channels)
        self.conv = Conv2d(bottleneck_channels, bottleneck_channels, 3, rng, stride=stride)
        self.bn_conv = BatchNorm(bottleneck_channels)
        self.expand = Conv2d(bottleneck_channels, out_channels, 1, rng, pad=0)
        self.bn_expand = BatchNorm(out_channels)
        self.shortcut = (
            _Shortcut(in_channels, out_channels, stride, rng)
            if stride != 1 or in_channels != out_channels
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn_reduce(self.reduce(x)))
        y = ops.relu(self.bn_conv(self.conv(y)))
        out = self.bn_expand(self.expand(y))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(out + identity)
