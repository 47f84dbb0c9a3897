"""In-memory image datasets, normalization, splits and mini-batch iteration.

Images are kept as raw NCHW float32 values in [0, 1]; augmentation works on
the raw values and the `Normalizer` is applied last, just before a batch
enters the network.
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from src.common.errors import ConfigError, DimensionError, IngestionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ConfigError(f"normalization stds must be positive, got {self.std}")

    def __call__(self, images: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=images.dtype)[None, :, None, None]
        std = np.asarray(self.std, dtype=images.dtype)[None, :, None, None]
        return (images - mean) / std

    @classmethod
    def from_images(cls, images: np.ndarray) -> "Normalizer":
        """Per-channel statistics of `images`."""
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(mean, np.where(std > 0, std, 1.0))


@dataclass
class Dataset:
    """Labelled images. `normalizer` is shared by every subset of the same source."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    normalizer: Normalizer | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise IngestionError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.classes, self.normalizer)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return images if self.normalizer is None else self.normalizer(images)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def split(dataset: Dataset, fraction: float, seed: int | list[int]) -> tuple[Dataset, Dataset]:
    """Shuffle with `seed` and cut into (first `fraction`, remainder)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def stratified_subset(dataset: Dataset, fraction: float, seed: int | list[int]) -> Dataset:
    """Keep round(fraction * class size) samples of every class, chosen with `seed`.

    Raises:
        ConfigError: fraction outside (0, 1].
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        count = max(1, int(round(fraction * len(members)))) if len(members) else 0
        keep.append(rng.permutation(members)[:count])
    indices = np.sort(np.concatenate(keep))
    logger.info("Labeled subset: %d of %d samples (fraction %.2f)", len(indices), len(dataset), fraction)
    return dataset.subset(indices)


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (raw images, labels) mini-batches; shuffled when `rng` is given.

    A trailing batch of one sample is dropped since batch norm needs two.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {batch_size}")
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield dataset.images[idx], dataset.labels[idx]


def num_batches(dataset: Dataset, batch_size: int) -> int:
    full, rest = divmod(len(dataset), batch_size)
    return full + (1 if rest >= 2 else 0)
