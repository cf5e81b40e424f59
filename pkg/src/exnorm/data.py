"""Labeled image sets: a seeded synthetic source and CIFAR-10 binaries."""

from __future__ import annotations

__all__ = [
    "CIFAR_RECORD_BYTES",
    "Cifar10Source",
    "LabeledSet",
    "SyntheticSource",
    "gen_synthetic",
    "load_cifar10",
    "load_source",
]

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import structlog

from exnorm.types import DatasetFormatError, EmptyDatasetError

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class SyntheticSource:
    """Class-conditional synthetic images."""

    classes: int = 3
    per_class: int = 100
    image_size: int = 16
    seed: int = 0
    noise: float = 0.3

    def describe(self) -> str:
        return "synthetic"


@dataclass(frozen=True)
class Cifar10Source:
    """A CIFAR-10 binary file, or a directory of ``data_batch_*.bin``."""

    path: Path
    subset: Optional[int] = None

    def describe(self) -> str:
        return f"cifar10:{self.path}"


DatasetSource = Union[SyntheticSource, Cifar10Source]


@dataclass
class LabeledSet:
    """N×3×H×W images with integer labels in [0, classes)."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.classes
        ):
            raise DatasetFormatError(
                f"Labels must lie in [0, {self.classes})"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(len(self))

    def astype(self, dtype: type) -> LabeledSet:
        return LabeledSet(
            self.images.astype(dtype), self.labels, self.classes
        )

    def batches(
        self,
        batch_size: int,
        order: Optional[np.ndarray] = None,
        drop_single: bool = False,
    ) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (sample ids, images, labels) in ``order``.

        ``drop_single`` drops a trailing batch that holds one sample.
        """
        if len(self) == 0:
            raise EmptyDatasetError("Cannot iterate an empty dataset")
        ids = self.sample_ids if order is None else order
        for start in range(0, len(ids), batch_size):
            chosen = ids[start : start + batch_size]
            if drop_single and len(chosen) == 1 and start > 0:
                continue
            yield chosen, self.images[chosen], self.labels[chosen]


def _standardize_channels(images: np.ndarray) -> np.ndarray:
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    return (images - mean) / std


def gen_synthetic(
    source: SyntheticSource, dtype: type = np.float32
) -> LabeledSet:
    """Generate ``per_class`` images of each class, grouped by class.

    Class c is an oriented sinusoidal grating at angle π·c/classes with a
    random phase, plus a Gaussian blob of random sign at a jittered position
    in channel c mod 3, plus Gaussian noise.  The random phase and sign make
    the classes hard for a linear model on raw pixels.
    """
    if source.classes < 2:
        raise DatasetFormatError(
            f"Need at least two classes, got {source.classes}"
        )
    rng = np.random.default_rng(source.seed)
    side = source.image_size
    coords = (np.arange(side) + 0.5) / side
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    images: List[np.ndarray] = []
    labels: List[int] = []
    for c in range(source.classes):
        theta = np.pi * c / source.classes
        along = xx * np.cos(theta) + yy * np.sin(theta)
        for _ in range(source.per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            grating = np.sin(2.0 * np.pi * 3.0 * along + phase)
            cy, cx = 0.5 + rng.uniform(-0.15, 0.15, size=2)
            dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob = np.exp(-dist2 / (2 * 0.15**2))
            sign = rng.choice((-1.0, 1.0))

            image = np.repeat(grating[np.newaxis], 3, axis=0)
            image[c % 3] += 1.5 * sign * blob
            image += source.noise * rng.standard_normal(image.shape)
            images.append(image)
            labels.append(c)

    data = _standardize_channels(np.stack(images))
    logger.info(
        "Loaded dataset",
        source=source.describe(),
        count=len(labels),
        seed=source.seed,
    )
    return LabeledSet(
        data.astype(dtype), np.asarray(labels, dtype=np.int64), source.classes
    )


def _read_cifar_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise DatasetFormatError(
            f"{path}: {raw.size} bytes is not a whole number of "
            f"{CIFAR_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DatasetFormatError(
            f"{path}: record {bad} has label {labels[bad]}"
        )
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def load_cifar10(
    path: Path, subset: Optional[int] = None, dtype: type = np.float32
) -> LabeledSet:
    """Read CIFAR-10 binary records.

    Each record is one label byte followed by 3072 pixel bytes: the R, G and
    B planes of a 32×32 image, row-major.  Pixels are scaled to [0, 1] and
    then standardized per channel over the loaded samples.

    Parameters
    ----------
    path: A ``.bin`` file, or a directory whose ``data_batch_*.bin`` files
      are read in name order.
    subset: Keep only the first ``subset`` samples.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("data_batch_*.bin"))
        if not files:
            raise DatasetFormatError(f"{path}: no data_batch_*.bin files")
    else:
        files = [path]

    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    if len(labels) == 0:
        raise EmptyDatasetError(f"{path}: no samples selected")

    data = _standardize_channels(images.astype(np.float64) / 255.0)
    logger.info("Loaded dataset", source=str(path), count=len(labels))
    return LabeledSet(data.astype(dtype), labels, CIFAR_CLASSES)


def load_source(
    source: DatasetSource, dtype: type = np.float32
) -> LabeledSet:
    logger.debug("Loading dataset", source=source.describe())
    if isinstance(source, SyntheticSource):
        return gen_synthetic(source, dtype)
    return load_cifar10(source.path, source.subset, dtype)
