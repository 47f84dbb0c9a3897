"""Fixed-size binary image records (the CIFAR-10/100 binary layout).

Each record is `label_bytes` label bytes followed by C*H*W pixel bytes stored
channel-planar (all of R, then G, then B). The CIFAR-10 record is
1 + 3*32*32 = 3073 bytes. With two label bytes (CIFAR-100) the last one is
the label used.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.common.errors import DimensionError, IngestionError
from src.data.dataset import Dataset, Normalizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecordLayout:
    channels: int = 3
    height: int = 32
    width: int = 32
    classes: int = 10
    label_bytes: int = 1

    @property
    def pixel_bytes(self) -> int:
        return self.channels * self.height * self.width

    @property
    def record_size(self) -> int:
        return self.label_bytes + self.pixel_bytes


CIFAR10_LAYOUT = RecordLayout()


def load_binary_records(
    path: str | Path, layout: RecordLayout = CIFAR10_LAYOUT, normalizer: Normalizer | None = None
) -> Dataset:
    """Decode every record of `path` in file order.

    Pixels become float32 in [0, 1]. Normalization is attached to the dataset
    (per-channel statistics of this file when `normalizer` is None) and applied
    when batches are drawn.

    Raises:
        IngestionError: the file holds no records, ends in a partial record
            or has a label out of range. Record errors carry their byte offset.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    size = layout.record_size
    count, rest = divmod(len(raw), size)
    if rest:
        raise IngestionError(
            f"{path}: {len(raw)} bytes is not a whole number of {size}-byte records", offset=count * size
        )
    if count == 0:
        raise IngestionError(f"{path}: no records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(count, size)
    labels = records[:, layout.label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= layout.classes)
    if bad.size:
        first = int(bad[0])
        message = f"{path}: label {labels[first]} >= {layout.classes} classes"
        raise IngestionError(message, offset=first * size)
    images = records[:, layout.label_bytes :].reshape(count, layout.channels, layout.height, layout.width)
    images = images.astype(np.float32) / np.float32(255.0)
    if normalizer is None:
        normalizer = Normalizer.from_images(images)
    logger.info("Loaded %d records from %s", count, path)
    return Dataset(images, labels, layout.classes, normalizer)


def write_binary_records(
    path: str | Path, images: np.ndarray, labels: np.ndarray, layout: RecordLayout
) -> None:
    """Quantize [0, 1] images to bytes and write them in the record layout."""
    expected = (layout.channels, layout.height, layout.width)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise DimensionError(f"images of shape {images.shape} do not match layout {expected}")
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= layout.classes):
        raise DimensionError(f"labels must lie in [0, {layout.classes})")
    pixels = np.clip(np.round(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    out = np.zeros((len(labels), layout.record_size), dtype=np.uint8)
    out[:, layout.label_bytes - 1] = labels
    out[:, layout.label_bytes :] = pixels.reshape(len(labels), -1)
    Path(path).write_bytes(out.tobytes())
    logger.info("Wrote %d records to %s", len(labels), path)
