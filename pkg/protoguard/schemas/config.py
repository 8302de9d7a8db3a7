"""
Experiment configuration schemas.

A run is described by one JSON document with ``train``, ``loss``,
``augment``, ``bank`` and ``attack`` sections. Defaults are the desk-scale
values; ``ExperimentConfig.full_scale()`` returns the full-scale recipe.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, List

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from protoguard.core.errors import ConfigurationError
from protoguard.schemas.enums import (
    AttackAlgorithm,
    AttentionLayout,
    ContrastiveObjective,
    LossTerm,
    PairSelection,
    TransformKind,
    VariantName,
    attack_algorithm_mapper,
    transform_kind_mapper,
)


class TrainConfig(BaseModel):
    """Optimizer, schedule and encoder options."""

    epochs: int = Field(default=40, ge=1, description="Training epochs")
    warmup_epochs: int = Field(default=4, ge=0, description="Epochs trained with the pixel-mapping loss only")
    lr: float = Field(default=0.03, gt=0, description="Initial learning rate")
    milestones: List[int] = Field(
        default_factory=lambda: [24, 32], description="Epochs after which the LR drops"
    )
    lr_factor: float = Field(default=0.1, gt=0, le=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=64, ge=2)
    variant: VariantName = Field(default=VariantName.XS)
    image_size: int = Field(default=32, ge=4)
    paa_blocks: int = Field(default=3, ge=0, description="Number of trailing bottlenecks built as PAA blocks")
    heads: int = Field(default=8, ge=1)
    attention_layout: AttentionLayout = Field(default=AttentionLayout.PARALLEL)
    encoder_momentum: float = Field(default=0.99, ge=0, le=1, description="m_enc of the momentum encoder")
    embedding_dim: int = Field(default=128, ge=2)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        milestones = self.milestones
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {milestones}")
        if milestones and milestones[-1] >= self.epochs:
            raise ValueError(f"milestones must be < epochs ({self.epochs}), got {milestones}")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        return self


class LossConfig(BaseModel):
    """Weights and temperatures of the training objective."""

    tau: float = Field(default=0.1, gt=0, description="Contrastive temperature")
    beta: float = Field(default=10.0, gt=0, description="Concentration smoother")
    negatives: int = Field(default=512, ge=1, description="r, negatives per anchor")
    lambda_pce: float = Field(default=1.0, ge=0)
    lambda_icl: float = Field(default=1.0, ge=0)
    gamma_min: float = Field(default=1e-3, gt=0, description="Floor applied to concentrations")
    terms: List[LossTerm] = Field(
        default_factory=lambda: [LossTerm.PM, LossTerm.PCE, LossTerm.ICL],
        description="Active loss terms",
    )
    contrastive: ContrastiveObjective = Field(default=ContrastiveObjective.PM)
    pce_positive_in_denominator: bool = Field(default=True)

    @field_validator("terms")
    @classmethod
    def _dedupe_terms(cls, value: List[LossTerm]) -> List[LossTerm]:
        if not value:
            raise ValueError("at least one loss term must be active")
        return sorted(set(value), key=[LossTerm.PM, LossTerm.PCE, LossTerm.ICL].index)

    def uses(self, term: LossTerm) -> bool:
        return term in self.terms


class AugmentConfig(BaseModel):
    """Transformation pool and pair-selection policy."""

    kinds: List[TransformKind] = Field(
        default_factory=lambda: [
            TransformKind.HORIZONTAL_FLIP,
            TransformKind.CROP_RESIZE,
            TransformKind.ROTATION,
            TransformKind.COLOR_JITTER,
            TransformKind.GRAYSCALE,
            TransformKind.GAUSSIAN_NOISE,
        ]
    )
    candidates: int = Field(default=8, ge=1, description="Q, candidate pairs per batch")
    selection: PairSelection = Field(default=PairSelection.ADVERSARIAL)
    noise_sigma: tuple[float, float] = Field(default=(0.02, 0.1))
    brightness: float = Field(default=0.4, ge=0, lt=1)
    contrast: float = Field(default=0.4, ge=0, lt=1)
    crop_scale: float = Field(
        default=0.6, gt=0, le=1, description="Smallest crop side as a fraction of the image"
    )

    @field_validator("kinds", mode="before")
    @classmethod
    def _normalize_kinds(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [transform_kind_mapper.to_enum(item) for item in value]
        return value

    @model_validator(mode="after")
    def _check_pool(self) -> "AugmentConfig":
        usable = [kind for kind in self.kinds if kind != TransformKind.IDENTITY]
        if len(set(usable)) < 2:
            raise ValueError("augmentation pool needs at least two distinct non-identity kinds")
        low, high = self.noise_sigma
        if not 0 <= low <= high:
            raise ValueError(f"noise_sigma range invalid: {self.noise_sigma}")
        return self


class BankConfig(BaseModel):
    prototypes: int = Field(default=10, ge=1, description="M")
    capacity: int = Field(default=10, ge=1, description="Entries kept per prototype queue")
    density_fraction: float = Field(
        default=0.02, gt=0, lt=1, description="Neighbour fraction used to pick the density radius"
    )


# Attacks ----------------------------------------------------------------------

_TABLE_DEFAULTS: dict[AttackAlgorithm, dict[str, Any]] = {
    AttackAlgorithm.FGSM: {"epsilon": 0.008},
    AttackAlgorithm.PGD: {"epsilon": 0.01, "alpha": 0.02, "steps": 40},
    AttackAlgorithm.BIM: {"epsilon": 0.03, "alpha": 0.01, "steps": 10},
    AttackAlgorithm.DEEPFOOL: {"steps": 20},
    AttackAlgorithm.CW: {"c": 1.0, "kappa": 2.0, "steps": 500, "learning_rate": 0.01},
    AttackAlgorithm.JSMA: {"gamma": 0.02},
}


class AttackSpec(BaseModel):
    """One attack with its parameters."""

    algorithm: AttackAlgorithm
    epsilon: float = Field(default=0.0, ge=0)
    alpha: float = Field(default=0.0, ge=0)
    steps: int = Field(default=1, ge=1)
    kappa: float = Field(default=0.0, ge=0)
    c: float = Field(default=1.0, ge=0)
    learning_rate: float = Field(default=0.01, gt=0)
    gamma: float = Field(default=0.02, gt=0, le=1, description="Fraction of values JSMA may modify")
    overshoot: float = Field(default=0.02, ge=0)
    random_start: bool = Field(default=False)
    seed: int = Field(default=0, ge=0)

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"example": {"algorithm": "pgd", "epsilon": 0.01, "alpha": 0.02, "steps": 40}},
    )

    @model_validator(mode="before")
    @classmethod
    def _apply_table_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "algorithm" not in data:
            return data
        algorithm = attack_algorithm_mapper.to_enum(data["algorithm"])
        merged = dict(_TABLE_DEFAULTS.get(algorithm, {}))
        merged.update(data)
        merged["algorithm"] = algorithm
        return merged

    @property
    def label(self) -> str:
        return self.algorithm.value

    @classmethod
    def table_defaults(cls) -> List["AttackSpec"]:
        return [cls(algorithm=algorithm) for algorithm in _TABLE_DEFAULTS]


class AttackSection(BaseModel):
    specs: List[AttackSpec] = Field(default_factory=AttackSpec.table_defaults)
    clean_pass_rate: float = Field(default=0.95, gt=0, le=1, description="q")
    eval_images: int = Field(default=200, ge=1, description="Cap on attacked test images")
    batch_size: int = Field(default=50, ge=1)
    probe_epochs: int = Field(default=200, ge=1)
    probe_lr: float = Field(default=0.5, gt=0)


class ExperimentConfig(BaseModel):
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    attack: AttackSection = Field(default_factory=AttackSection)

    @classmethod
    def full_scale(cls) -> "ExperimentConfig":
        return cls(
            train=TrainConfig(
                epochs=200,
                warmup_epochs=20,
                milestones=[120, 160],
                batch_size=256,
                variant=VariantName.S,
                image_size=224,
            ),
            loss=LossConfig(negatives=16000),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return load_model(cls, path)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def load_model(model: type[BaseModel], path: str | Path) -> Any:
    """Validate a JSON file against ``model``, mapping failures to ConfigurationError."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"Cannot read config {path}: {exc}") from exc
    return parse_model(model, raw, source=str(path))


def parse_model(model: type[BaseModel], raw: str | dict, source: str = "<memory>") -> Any:
    try:
        payload = json.loads(raw) if isinstance(raw, str) else raw
        return model.model_validate(payload)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}: invalid JSON ({exc})") from exc
    except ValidationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc


def load_attack_specs(path: str | Path) -> List[AttackSpec]:
    """Read an attack list: either a JSON array or ``{"specs": [...]}``."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Cannot read attack list {path}: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get("specs", [])
    return parse_model(AttackSection, {"specs": payload}, source=str(path)).specs


class SyntheticDatasetSpec(BaseModel):
    """Procedural shape dataset."""

    classes: int = Field(default=8, ge=2, le=16)
    images_per_class: int = Field(default=250, ge=1)
    image_size: int = Field(default=32, ge=8)
    noise: float = Field(default=0.05, ge=0, description="Std-dev of additive Gaussian noise")
    seed: int = Field(default=0, ge=0)
    split_fractions: tuple[float, float, float] = Field(default=(0.8, 0.1, 0.1))

    @model_validator(mode="after")
    def _check_fractions(self) -> "SyntheticDatasetSpec":
        if abs(sum(self.split_fractions) - 1.0) > 1e-6 or min(self.split_fractions) < 0:
            raise ValueError(f"split fractions must be non-negative and sum to 1: {self.split_fractions}")
        return self


class AblationGrid(BaseModel):
    """One-at-a-time sweeps around a base configuration."""

    loss_terms: List[List[LossTerm]] = Field(default_factory=list)
    paa_blocks: List[int] = Field(default_factory=list)
    tau: List[float] = Field(default_factory=list)
    beta: List[float] = Field(default_factory=list)
    lambda_pce: List[float] = Field(default_factory=list)
    lambda_icl: List[float] = Field(default_factory=list)
    contrastive: List[ContrastiveObjective] = Field(default_factory=list)
    selection: List[PairSelection] = Field(default_factory=list)
    attention_layout: List[AttentionLayout] = Field(default_factory=list)
    include_untrained: bool = Field(default=True, description="Add the untrained-encoder reference row")

    def is_empty(self) -> bool:
        return not any(
            getattr(self, name) for name in type(self).model_fields if name != "include_untrained"
        )


__all__ = [
    "TrainConfig",
    "LossConfig",
    "AugmentConfig",
    "BankConfig",
    "AttackSpec",
    "AttackSection",
    "ExperimentConfig",
    "SyntheticDatasetSpec",
    "AblationGrid",
    "load_model",
    "parse_model",
    "load_attack_specs",
]
