"""
Image transformations and adversarial selection of augmentation pairs.

Each image of a batch receives the candidate pair (t, s) whose two views are
hardest to map onto each other under the pixel-mapping loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from protoguard.core.errors import ConfigurationError, ContractError, DimensionError
from protoguard.models.module import Module
from protoguard.schemas.config import AugmentConfig
from protoguard.schemas.enums import TransformKind, transform_kind_mapper
from protoguard.services.objectives import pm_terms
from protoguard.tensor.tensor import Tensor, no_grad

logger = structlog.get_logger(__name__)

_LUMA = np.array([0.299, 0.587, 0.114])


class Transform(BaseModel):
    kind: TransformKind
    seed: int = Field(default=0, ge=0)
    quarter_turns: int = Field(default=1, ge=0, le=3)
    crop_scale: float = Field(default=0.6, gt=0, le=1)
    brightness: float = Field(default=0.0, ge=0, lt=1)
    contrast: float = Field(default=0.0, ge=0, lt=1)
    sigma: float = Field(default=0.0, ge=0)

    model_config = ConfigDict(frozen=True)

    @field_validator("kind", mode="before")
    @classmethod
    def _normalize_kind(cls, value: Any) -> Any:
        return transform_kind_mapper.to_enum(value)


IDENTITY = Transform(kind=TransformKind.IDENTITY)


class TransformPair(BaseModel):
    t: Transform
    s: Transform

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _informative(self) -> "TransformPair":
        if self.t == self.s and self.t.kind != TransformKind.IDENTITY:
            raise ValueError("t and s must differ unless both are identity")
        return self


def _bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of ``[C, h, w]`` to ``[C, height, width]``."""
    _, h, w = image.shape
    ys = np.linspace(0.0, h - 1, height)
    xs = np.linspace(0.0, w - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def apply(x: np.ndarray, tr: Transform, index: int = 0) -> np.ndarray:
    """Transform one ``[C, H, W]`` image; ``index`` decorrelates images sharing ``tr``."""
    if x.ndim != 3:
        raise DimensionError("apply expects one [C, H, W] image", x.shape)
    rng = np.random.default_rng([tr.seed, index])
    kind = tr.kind

    if kind == TransformKind.IDENTITY:
        out = x
    elif kind == TransformKind.HORIZONTAL_FLIP:
        out = x[:, :, ::-1]
    elif kind == TransformKind.ROTATION:
        if tr.quarter_turns % 2 and x.shape[1] != x.shape[2]:
            raise DimensionError("odd quarter turns need a square image", x.shape)
        out = np.rot90(x, k=tr.quarter_turns, axes=(1, 2))
    elif kind == TransformKind.CROP_RESIZE:
        _, h, w = x.shape
        scale = rng.uniform(tr.crop_scale, 1.0)
        ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = _bilinear_resize(x[:, top : top + ch, left : left + cw], h, w)
    elif kind == TransformKind.COLOR_JITTER:
        bright = rng.uniform(1 - tr.brightness, 1 + tr.brightness)
        contrast = rng.uniform(1 - tr.contrast, 1 + tr.contrast)
        y = x * bright
        mean = y.mean()
        out = (y - mean) * contrast + mean
    elif kind == TransformKind.GRAYSCALE:
        if x.shape[0] == 3:
            luma = np.tensordot(_LUMA, x, axes=(0, 0))
        else:
            luma = x.mean(axis=0)
        out = np.broadcast_to(luma, x.shape)
    elif kind == TransformKind.GAUSSIAN_NOISE:
        out = x + tr.sigma * rng.standard_normal(x.shape)
    else:  # pragma: no cover
        raise ConfigurationError(f"Unknown transform kind {kind}")

    return np.clip(np.ascontiguousarray(out), 0.0, 1.0).astype(x.dtype, copy=False)


def apply_batch(images: np.ndarray, tr: Transform) -> np.ndarray:
    return np.stack([apply(image, tr, index=i) for i, image in enumerate(images)])


def apply_pairs(images: np.ndarray, pairs: Sequence[TransformPair]) -> tuple[np.ndarray, np.ndarray]:
    """Return the t-views and s-views of a batch, one pair per image."""
    if len(pairs) != len(images):
        raise ContractError(f"{len(pairs)} pairs for {len(images)} images")
    views_t = np.stack([apply(image, pair.t, index=i) for i, (image, pair) in enumerate(zip(images, pairs))])
    views_s = np.stack([apply(image, pair.s, index=i) for i, (image, pair) in enumerate(zip(images, pairs))])
    return views_t, views_s


def _random_transform(kind: TransformKind, config: AugmentConfig, rng: np.random.Generator) -> Transform:
    low, high = config.noise_sigma
    return Transform(
        kind=kind,
        seed=int(rng.integers(0, 2**31 - 1)),
        quarter_turns=int(rng.integers(1, 4)),
        crop_scale=config.crop_scale,
        brightness=config.brightness,
        contrast=config.contrast,
        sigma=float(rng.uniform(low, high)),
    )


def sample_candidates(config: AugmentConfig, rng: np.random.Generator) -> list[TransformPair]:
    """Draw Q pairs, each combining two distinct transform kinds."""
    kinds = sorted({k for k in config.kinds if k != TransformKind.IDENTITY}, key=list(TransformKind).index)
    candidates = []
    for _ in range(config.candidates):
        first, second = rng.choice(len(kinds), size=2, replace=False)
        candidates.append(
            TransformPair(
                t=_random_transform(kinds[int(first)], config, rng),
                s=_random_transform(kinds[int(second)], config, rng),
            )
        )
    return candidates


@dataclass
class SelectedPairs:
    pairs: list[TransformPair]
    choice: np.ndarray
    losses: np.ndarray  # [Q, B] per-image pixel-mapping terms


def candidate_losses(
    batch: np.ndarray, candidates: Sequence[TransformPair], encoder: Module, tau: float
) -> np.ndarray:
    """Per-image pixel-mapping terms ``[Q, B]``, one row per candidate pair."""
    previous = encoder.training
    encoder.eval()
    cache: dict[Transform, np.ndarray] = {}

    def embed(tr: Transform) -> np.ndarray:
        if tr not in cache:
            cache[tr] = encoder(Tensor(apply_batch(batch, tr))).data
        return cache[tr]

    try:
        with no_grad():
            rows = [
                pm_terms(Tensor(embed(pair.t)), Tensor(embed(pair.s)), tau).data
                for pair in candidates
            ]
    finally:
        encoder.train(previous)
    return np.stack(rows)


def select_pair(
    batch: np.ndarray, candidates: Sequence[TransformPair], encoder: Module, tau: float
) -> SelectedPairs:
    """Pick, per image, the candidate with the largest pixel-mapping term.

    ``np.argmax`` returns the first maximum, so ties go to the lowest
    candidate index.
    """
    if not candidates:
        raise ContractError("select_pair needs at least one candidate pair")
    losses = candidate_losses(batch, candidates, encoder, tau)
    choice = np.argmax(losses, axis=0)
    return SelectedPairs([candidates[int(c)] for c in choice], choice, losses)


def select_uniform(
    batch_size: int, candidates: Sequence[TransformPair], rng: np.random.Generator
) -> SelectedPairs:
    if not candidates:
        raise ContractError("select_uniform needs at least one candidate pair")
    choice = rng.integers(0, len(candidates), size=batch_size)
    return SelectedPairs([candidates[int(c)] for c in choice], choice, np.empty((0, batch_size)))
