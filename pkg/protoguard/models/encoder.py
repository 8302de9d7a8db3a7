"""
PAA-ResNet encoder family.

S/M/L keep the ResNet-50 stage depths and scale every width by 1, 1.5 and 2;
XS is the small desk-scale network used by tests and the default config.
The last ``paa_blocks`` bottlenecks of the network are PAA blocks, the
earlier ones plain convolutional bottlenecks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import structlog

from protoguard.core.errors import ConfigurationError, ContractError, DimensionError
from protoguard.models.blocks import ConvBottleneck, PAABlock, PAABlockConfig
from protoguard.models.layers import BatchNorm, Conv2d, Linear
from protoguard.models.module import Module, Parameter, Sequential
from protoguard.schemas.config import TrainConfig
from protoguard.schemas.enums import AttentionLayout, Mode, VariantName
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.tensor import Tensor

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class EncoderVariant:
    name: VariantName
    multiplier: float
    stem_channels: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    widths: tuple[int, ...]
    depths: tuple[int, ...]
    paa_blocks: int = 3

    @property
    def spatial_reduction(self) -> int:
        pooled = 2 if self.stem_pool else 1
        return self.stem_stride * pooled * 2 ** (len(self.depths) - 1)


def _resnet50_like(name: VariantName, multiplier: float) -> EncoderVariant:
    return EncoderVariant(
        name=name,
        multiplier=multiplier,
        stem_channels=int(64 * multiplier),
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        widths=tuple(int(w * multiplier) for w in (64, 128, 256, 512)),
        depths=(3, 4, 6, 3),
    )


VARIANTS: dict[VariantName, EncoderVariant] = {
    VariantName.XS: EncoderVariant(
        name=VariantName.XS,
        multiplier=0.25,
        stem_channels=16,
        stem_kernel=3,
        stem_stride=2,
        stem_pool=False,
        widths=(16, 32),
        depths=(2, 2),
    ),
    VariantName.S: _resnet50_like(VariantName.S, 1.0),
    VariantName.M: _resnet50_like(VariantName.M, 1.5),
    VariantName.L: _resnet50_like(VariantName.L, 2.0),
}


class Stem(Module):
    def __init__(self, variant: EncoderVariant, rng: np.random.Generator) -> None:
        super().__init__()
        self.pool = variant.stem_pool
        self.conv = Conv2d(3, variant.stem_channels, variant.stem_kernel, rng, stride=variant.stem_stride)
        self.bn = BatchNorm(variant.stem_channels)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn(self.conv(x)))
        return F.max_pool2d(y, kernel=3, stride=2, pad=1) if self.pool else y


class PAAResNet(Module):
    """Image batch ``[B, 3, S, S]`` -> unit-norm embeddings ``[B, D]``."""

    def __init__(
        self,
        variant: EncoderVariant,
        image_size: int,
        rng: np.random.Generator,
        embedding_dim: int = 128,
        heads: int = 8,
        paa_blocks: int | None = None,
        layout: AttentionLayout = AttentionLayout.PARALLEL,
    ) -> None:
        super().__init__()
        if image_size % variant.spatial_reduction:
            raise ConfigurationError(
                f"image size {image_size} not divisible by the {variant.name.value} "
                f"reduction factor {variant.spatial_reduction}"
            )
        self.variant = variant
        self.image_size = image_size
        self.embedding_dim = embedding_dim

        total = sum(variant.depths)
        n_paa = min(variant.paa_blocks if paa_blocks is None else paa_blocks, total)
        first_paa = total - n_paa

        self.stem = Stem(variant, rng)
        size = image_size // variant.stem_stride // (2 if variant.stem_pool else 1)
        channels = variant.stem_channels
        index = 0
        for i, (width, depth) in enumerate(zip(variant.widths, variant.depths), start=1):
            stage = Sequential()
            for j in range(depth):
                stride = 2 if (j == 0 and i > 1) else 1
                out = 4 * width
                if index >= first_paa:
                    cfg = PAABlockConfig(channels, width, out, stride, size, size, heads)
                    block: Module = PAABlock(cfg, rng, layout=layout)
                else:
                    block = ConvBottleneck(channels, width, out, stride, rng)
                stage.add_module(f"block{j}", block)
                channels, size, index = out, size // stride, index + 1
            self.add_module(f"stage{i}", stage)
        self.fc = Linear(channels, embedding_dim, rng)

        logger.debug(
            "Encoder built",
            variant=variant.name.value,
            paa_blocks=n_paa,
            layout=layout.value,
            parameters=self.parameter_count(),
        )

    def stages(self) -> list[Module]:
        return [module for name, module in self._modules.items() if name.startswith("stage")]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(
                f"{self.variant.name.value} encoder expects [B, 3, {self.image_size}, {self.image_size}]",
                x.shape,
            )
        h = self.stem(x)
        for stage in self.stages():
            h = stage(h)
        pooled = ops.mean(h, axis=(2, 3))
        return F.l2_normalize(self.fc(pooled))


def build_encoder(config: TrainConfig, seed: int | None = None) -> PAAResNet:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return PAAResNet(
        VARIANTS[config.variant],
        config.image_size,
        rng,
        embedding_dim=config.embedding_dim,
        heads=config.heads,
        paa_blocks=config.paa_blocks,
        layout=config.attention_layout,
    )


def encode(encoder: PAAResNet, batch: Tensor | np.ndarray, mode: Mode = Mode.EVAL) -> Tensor:
    """Embed a batch with the encoder switched to ``mode``; the mode is restored afterwards."""
    previous = encoder.training
    encoder.train(mode == Mode.TRAIN)
    try:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        return encoder(x)
    finally:
        encoder.train(previous)


def momentum_encoder_update(
    online: Sequence[Parameter], momentum: Sequence[Parameter], m_enc: float
) -> None:
    """``momentum <- m_enc * momentum + (1 - m_enc) * online`` in place."""
    if len(online) != len(momentum):
        raise ContractError(
            f"parameter lists differ in length: {len(online)} vs {len(momentum)}"
        )
    for index, (src, dst) in enumerate(zip(online, momentum)):
        if src.shape != dst.shape:
            raise ContractError(f"parameter {index} shape differs: {src.shape} vs {dst.shape}")
    for src, dst in zip(online, momentum):
        dst.data = (m_enc * dst.data + (1.0 - m_enc) * src.data).astype(dst.data.dtype)
