"""
Procedural shape dataset: generation to disk and loading.

A dataset directory holds one binary PPM per image, ``index.csv`` with
``filename,label,split`` rows and ``dataset.json`` with the generating spec.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
import structlog
from PIL import Image, ImageDraw

from protoguard.core.errors import ContractError, DimensionError
from protoguard.schemas.config import SyntheticDatasetSpec
from protoguard.schemas.enums import Shape, Split

logger = structlog.get_logger(__name__)

INDEX_FILE = "index.csv"
SPEC_FILE = "dataset.json"
INDEX_COLUMNS = ["filename", "label", "split"]

PALETTE: list[tuple[int, int, int]] = [
    (230, 60, 50),
    (60, 190, 80),
    (60, 90, 230),
    (235, 210, 60),
]
BACKGROUND = (30, 30, 30)
SHAPES = list(Shape)


def class_shape(label: int) -> tuple[Shape, tuple[int, int, int]]:
    """Shape cycles fastest, then colour: 4 shapes x 4 colours cover 16 classes."""
    return SHAPES[label % len(SHAPES)], PALETTE[label // len(SHAPES)]


def render_shape(
    shape: Shape, color: tuple[int, int, int], size: int, rng: np.random.Generator
) -> Image.Image:
    """Draw one shape with jittered centre and scale on a dark background."""
    image = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(image)
    radius = size * rng.uniform(0.22, 0.34)
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    box = [cx - radius, cy - radius, cx + radius, cy + radius]

    if shape == Shape.CIRCLE:
        draw.ellipse(box, fill=color)
    elif shape == Shape.SQUARE:
        draw.rectangle(box, fill=color)
    elif shape == Shape.TRIANGLE:
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)], fill=color)
    else:
        arm = radius / 3
        draw.rectangle([cx - radius, cy - arm, cx + radius, cy + arm], fill=color)
        draw.rectangle([cx - arm, cy - radius, cx + arm, cy + radius], fill=color)
    return image


def assign_splits(n: int, fractions: tuple[float, float, float], rng: np.random.Generator) -> np.ndarray:
    """Seeded shuffle, then the first ``round(f_train * n)`` rows train, the next ``round(f_val * n)`` val."""
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    splits = np.empty(n, dtype=object)
    order = rng.permutation(n)
    splits[order[:n_train]] = Split.TRAIN.value
    splits[order[n_train : n_train + n_val]] = Split.VAL.value
    splits[order[n_train + n_val :]] = Split.TEST.value
    return splits


def generate_dataset(spec: SyntheticDatasetSpec, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    rows = []
    for label in range(spec.classes):
        shape, color = class_shape(label)
        for k in range(spec.images_per_class):
            base = np.asarray(render_shape(shape, color, spec.image_size, rng), dtype=np.float64) / 255.0
            noisy = np.clip(base + spec.noise * rng.standard_normal(base.shape), 0.0, 1.0)
            filename = f"c{label:02d}_{k:05d}.ppm"
            Image.fromarray(np.round(noisy * 255.0).astype(np.uint8)).save(
                out / filename, format="PPM"
            )
            rows.append((filename, label))

    index = pd.DataFrame(rows, columns=["filename", "label"])
    index["split"] = assign_splits(len(index), spec.split_fractions, rng)
    index[INDEX_COLUMNS].to_csv(out / INDEX_FILE, index=False)
    (out / SPEC_FILE).write_text(spec.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Dataset generated", path=str(out), images=len(index), classes=spec.classes)
    return out


@dataclass
class ImageDataset:
    """Images ``[n, 3, S, S]`` in ``[0, 1]`` with labels and split tags."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    filenames: list[str]
    root: Path
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def split(self, which: Split | str) -> "ImageDataset":
        mask = self.splits == Split(which).value
        return ImageDataset(
            images=self.images[mask],
            labels=self.labels[mask],
            splits=self.splits[mask],
            filenames=[name for name, keep in zip(self.filenames, mask) if keep],
            root=self.root,
            classes=self.classes,
        )

    def head(self, count: int) -> "ImageDataset":
        return ImageDataset(
            self.images[:count],
            self.labels[:count],
            self.splits[:count],
            self.filenames[:count],
            self.root,
            self.classes,
        )

    def batches(
        self, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.images[idx], self.labels[idx]


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def to_pixels(images: np.ndarray) -> np.ndarray:
    """8-bit values of images in ``[0, 1]``, rounded to nearest."""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(images: np.ndarray) -> np.ndarray:
    """Images exactly as ``read_image`` returns them after a ``write_image`` round trip."""
    return to_pixels(images).astype(np.float32) / 255.0


def write_image(path: Path, image: np.ndarray) -> None:
    """Save a ``[3, H, W]`` image in ``[0, 1]`` as binary PPM."""
    pixels = to_pixels(image).transpose(1, 2, 0)
    Image.fromarray(pixels).save(path, format="PPM")


def load_dataset(root: str | Path, image_size: int | None = None) -> ImageDataset:
    root = Path(root)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise ContractError(f"no {INDEX_FILE} in {root}")
    index = pd.read_csv(index_path)
    missing = set(INDEX_COLUMNS) - set(index.columns)
    if missing:
        raise ContractError(f"{index_path} lacks columns {sorted(missing)}")
    if index.empty:
        raise ContractError(f"{index_path} lists no images")

    images = np.stack([read_image(root / name) for name in index["filename"]])
    if image_size is not None and images.shape[-2:] != (image_size, image_size):
        raise DimensionError(f"dataset images are not {image_size}x{image_size}", images.shape)
    labels = index["label"].to_numpy(dtype=np.int64)
    logger.info("Dataset loaded", path=str(root), images=len(labels))
    return ImageDataset(
        images=images,
        labels=labels,
        splits=index["split"].astype(str).to_numpy(dtype=object),
        filenames=index["filename"].astype(str).tolist(),
        root=root,
        classes=int(labels.max()) + 1,
    )
