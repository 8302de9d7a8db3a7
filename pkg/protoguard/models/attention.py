"""
Position-sensitive axial self-attention.

Attention runs along one spatial axis at a time. Every line of the feature
map along that axis is attended independently; queries, keys and values get
learned relative-position terms that depend only on the offset ``i - j``
and are shared by all heads.
"""

from __future__ import annotations

import numpy as np

from protoguard.core.errors import ConfigurationError, DimensionError
from protoguard.models.layers import BatchNorm
from protoguard.models.module import Module, Parameter
from protoguard.schemas.enums import Axis
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.tensor import Tensor, default_dtype


def relative_index(length: int) -> np.ndarray:
    """``index[i, j] = i - j + length - 1`` into a table of ``2*length - 1`` offsets."""
    positions = np.arange(length)
    return positions[:, None] - positions[None, :] + length - 1


class AxialAttention(Module):
    def __init__(
        self,
        channels: int,
        length: int,
        axis: Axis,
        rng: np.random.Generator,
        heads: int = 8,
    ) -> None:
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.channels = channels
        self.length = length
        self.axis = axis
        self.heads = heads
        self.head_dim = channels // heads
        dtype = default_dtype()

        scale = np.sqrt(1.0 / channels)
        self.w_q = Parameter(rng.normal(0.0, scale, (channels, channels)).astype(dtype))
        self.w_k = Parameter(rng.normal(0.0, scale, (channels, channels)).astype(dtype))
        self.w_v = Parameter(rng.normal(0.0, scale, (channels, channels)).astype(dtype))

        table = (self.head_dim, 2 * length - 1)
        rel_scale = np.sqrt(1.0 / self.head_dim)
        self.r_q = Parameter(rng.normal(0.0, rel_scale, table).astype(dtype), decay=False)
        self.r_k = Parameter(rng.normal(0.0, rel_scale, table).astype(dtype), decay=False)
        self.r_v = Parameter(rng.normal(0.0, rel_scale, table).astype(dtype), decay=False)

        self.bn_logits = BatchNorm(heads)
        self.bn_output = BatchNorm(channels)
        self._index = relative_index(length)

    # Layout ------------------------------------------------------------------

    def to_lines(self, x: Tensor) -> Tensor:
        """``[B, C, H, W]`` -> ``[B * other, C, length]``."""
        b, c, h, w = x.shape
        if self.axis == Axis.HEIGHT:
            return ops.reshape(ops.transpose(x, (0, 3, 1, 2)), (b * w, c, h))
        return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b * h, c, w))

    def from_lines(self, lines: Tensor, shape: tuple[int, ...]) -> Tensor:
        b, _, h, w = shape
        c = lines.shape[1]
        if self.axis == Axis.HEIGHT:
            return ops.transpose(ops.reshape(lines, (b, w, c, h)), (0, 2, 3, 1))
        return ops.transpose(ops.reshape(lines, (b, h, c, w)), (0, 2, 1, 3))

    # Attention ---------------------------------------------------------------

    def _project(self, weight: Parameter, lines: Tensor) -> Tensor:
        n, _, length = lines.shape
        projected = ops.einsum("oc,ncl->nol", weight, lines)
        return ops.reshape(projected, (n, self.heads, self.head_dim, length))

    def _relative(self, table: Parameter) -> Tensor:
        return ops.getitem(table, (slice(None), self._index))

    def _check(self, lines: Tensor) -> None:
        if lines.ndim != 3 or lines.shape[1] != self.channels or lines.shape[2] != self.length:
            raise DimensionError(
                f"{self.axis.value} attention expects [N, {self.channels}, {self.length}]",
                lines.shape,
            )

    def attention_weights(self, lines: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(weights[N, heads, L, L], values[N, heads, d, L])``."""
        self._check(lines)
        q = self._project(self.w_q, lines)
        k = self._project(self.w_k, lines)
        v = self._project(self.w_v, lines)
        qk = ops.einsum("nhdi,nhdj->nhij", q, k)
        qr = ops.einsum("nhdi,dij->nhij", q, self._relative(self.r_q))
        kr = ops.einsum("nhdj,dij->nhij", k, self._relative(self.r_k))
        logits = self.bn_logits(qk + qr + kr)
        return F.softmax_axis(logits, axis=-1), v

    def attend(self, lines: Tensor) -> Tensor:
        weights, v = self.attention_weights(lines)
        sv = ops.einsum("nhij,nhdj->nhdi", weights, v)
        sve = ops.einsum("nhij,dij->nhdi", weights, self._relative(self.r_v))
        n = lines.shape[0]
        return self.bn_output(ops.reshape(sv + sve, (n, self.channels, self.length)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2 if self.axis == Axis.HEIGHT else 3] != self.length:
            raise DimensionError(f"{self.axis.value} attention length is {self.length}", x.shape)
        return self.from_lines(self.attend(self.to_lines(x)), x.shape)
