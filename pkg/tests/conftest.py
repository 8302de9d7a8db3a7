"""
Shared fixtures: seeded generators, a tiny XS encoder and a tiny on-disk
shape dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from protoguard.core.logging import configure_logging
from protoguard.models.encoder import PAAResNet, build_encoder
from protoguard.schemas.config import (
    AttackSection,
    AugmentConfig,
    BankConfig,
    ExperimentConfig,
    LossConfig,
    SyntheticDatasetSpec,
    TrainConfig,
)
from protoguard.schemas.results import TrainingSummary
from protoguard.services.dataset import ImageDataset, generate_dataset, load_dataset
from protoguard.services.training import Trainer
from protoguard.tensor.tensor import precision

configure_logging("WARNING", "console")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


def tiny_config(**train_overrides: object) -> ExperimentConfig:
    """Desk config shrunk so one epoch on an 8x8 dataset takes seconds."""
    train = {
        "epochs": 2,
        "warmup_epochs": 1,
        "milestones": [],
        "batch_size": 8,
        "image_size": 8,
        "paa_blocks": 2,
        "heads": 2,
        "embedding_dim": 16,
        "seed": 0,
    }
    train.update(train_overrides)
    return ExperimentConfig(
        train=TrainConfig(**train),
        loss=LossConfig(negatives=32),
        augment=AugmentConfig(candidates=2),
        bank=BankConfig(prototypes=3, capacity=4),
        attack=AttackSection(eval_images=4, batch_size=4, probe_epochs=5),
    )


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def encoder(config: ExperimentConfig) -> PAAResNet:
    model = build_encoder(config.train)
    model.eval()
    return model


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    spec = SyntheticDatasetSpec(classes=2, images_per_class=20, image_size=8, noise=0.02, seed=3)
    return generate_dataset(spec, tmp_path_factory.mktemp("shapes"))


@pytest.fixture(scope="session")
def dataset(dataset_dir: Path) -> ImageDataset:
    return load_dataset(dataset_dir, image_size=8)


@pytest.fixture(scope="session")
def detection_dataset(tmp_path_factory: pytest.TempPathFactory) -> ImageDataset:
    """Small train split, but enough validation images for threshold calibration."""
    spec = SyntheticDatasetSpec(
        classes=2, images_per_class=80, image_size=8, noise=0.02, seed=5, split_fractions=(0.2, 0.7, 0.1)
    )
    return load_dataset(generate_dataset(spec, tmp_path_factory.mktemp("detection")), image_size=8)


@pytest.fixture(scope="session")
def trained_run(
    tmp_path_factory: pytest.TempPathFactory, dataset: ImageDataset
) -> tuple[Trainer, TrainingSummary]:
    """Two tiny epochs, the first one warm-up, shared by checkpoint and CLI tests."""
    trainer = Trainer(tiny_config(), dataset, tmp_path_factory.mktemp("run"), progress=False)
    return trainer, trainer.run()
