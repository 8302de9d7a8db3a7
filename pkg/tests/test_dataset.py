"""
Procedural shape dataset on disk.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from protoguard.core.errors import ContractError, DimensionError
from protoguard.schemas.config import SyntheticDatasetSpec
from protoguard.schemas.enums import Shape, Split
from protoguard.services.dataset import (
    INDEX_FILE,
    PALETTE,
    SPEC_FILE,
    assign_splits,
    class_shape,
    generate_dataset,
    load_dataset,
    quantize,
    read_image,
    write_image,
)


class TestGenerate:
    def test_layout(self, dataset_dir):
        index = pd.read_csv(dataset_dir / INDEX_FILE)
        assert list(index.columns) == ["filename", "label", "split"]
        assert len(index) == 40
        assert all((dataset_dir / name).is_file() for name in index["filename"])
        assert index["split"].value_counts().to_dict() == {"train": 32, "val": 4, "test": 4}
        spec = SyntheticDatasetSpec.model_validate_json((dataset_dir / SPEC_FILE).read_text())
        assert spec.images_per_class == 20

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticDatasetSpec(classes=2, images_per_class=3, image_size=8, seed=9)
        first = generate_dataset(spec, tmp_path / "a")
        second = generate_dataset(spec, tmp_path / "b")
        assert (first / INDEX_FILE).read_bytes() == (second / INDEX_FILE).read_bytes()
        for name in pd.read_csv(first / INDEX_FILE)["filename"]:
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_classes_cycle_shape_then_colour(self):
        assert class_shape(0) == (Shape.CIRCLE, PALETTE[0])
        shape, colour = class_shape(5)
        assert shape == list(Shape)[1] and colour == PALETTE[1]
        assert len({class_shape(label) for label in range(16)}) == 16

    def test_split_assignment(self, rng):
        splits = assign_splits(10, (0.8, 0.1, 0.1), rng)
        assert sorted(splits.tolist()) == ["test"] + ["train"] * 8 + ["val"]

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            SyntheticDatasetSpec(classes=17)
        with pytest.raises(ValidationError):
            SyntheticDatasetSpec(split_fractions=(0.5, 0.2, 0.2))
        with pytest.raises(ValidationError):
            SyntheticDatasetSpec(image_size=4)


class TestLoad:
    def test_images_and_labels(self, dataset):
        assert dataset.images.shape == (40, 3, 8, 8)
        assert dataset.images.dtype == np.float32
        assert 0.0 <= dataset.images.min() and dataset.images.max() <= 1.0
        assert dataset.classes == 2 and dataset.image_size == 8
        assert sorted(set(dataset.labels.tolist())) == [0, 1]

    def test_splits_and_head(self, dataset):
        train = dataset.split(Split.TRAIN)
        assert len(train) == 32 and set(train.splits.tolist()) == {"train"}
        assert len(dataset.split("test")) == 4
        assert len(train.head(5)) == 5 and train.head(5).filenames == train.filenames[:5]

    def test_batches_cover_every_image_once(self, dataset, rng):
        seen = []
        for images, labels in dataset.batches(7, rng):
            assert len(images) == len(labels) <= 7
            seen.extend(map(bytes, images.reshape(len(images), -1)))
        assert len(seen) == len(dataset)
        full = [batch for batch, _ in dataset.batches(7, drop_last=True)]
        assert [len(b) for b in full] == [7] * 5

    def test_missing_index(self, tmp_path):
        with pytest.raises(ContractError):
            load_dataset(tmp_path)

    def test_wrong_image_size(self, dataset_dir):
        with pytest.raises(DimensionError):
            load_dataset(dataset_dir, image_size=16)

    def test_image_round_trip(self, tmp_path, rng):
        image = rng.uniform(0, 1, (3, 5, 6))
        write_image(tmp_path / "x.ppm", image)
        loaded = read_image(tmp_path / "x.ppm")
        assert loaded.shape == (3, 5, 6)
        np.testing.assert_allclose(loaded, image, atol=0.5 / 255 + 1e-6)

    def test_quantize_matches_the_written_file(self, tmp_path, rng):
        image = rng.uniform(-0.1, 1.1, (3, 4, 4))
        write_image(tmp_path / "q.ppm", image)
        np.testing.assert_array_equal(read_image(tmp_path / "q.ppm"), quantize(image))
        np.testing.assert_array_equal(quantize(quantize(image)), quantize(image))
