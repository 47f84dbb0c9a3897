"""Build the train and test datasets a run configuration describes."""

import logging

import numpy as np

from src.config import DatasetSpec
from src.data.dataset import Dataset, Normalizer
from src.data.records import RecordLayout, load_binary_records
from src.data.synthetic import synth_dataset

logger = logging.getLogger(__name__)


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Return (train, test) sharing one normalizer.

    Without configured statistics the normalizer is the per-channel mean and
    std of the training images.
    """
    if spec.source == "synthetic":
        common = dict(size=spec.image_size, noise=spec.noise, channels=spec.channels, template_seed=spec.seed)
        train = synth_dataset(spec.classes, spec.train_samples, seed=spec.seed, **common)
        test = synth_dataset(spec.classes, spec.test_samples, seed=spec.seed + 1, **common)
    else:
        layout = RecordLayout(spec.channels, spec.image_size, spec.image_size, spec.classes, spec.label_bytes)
        train = load_binary_records(spec.path, layout)
        test = load_binary_records(spec.test_path, layout)
    if spec.mean is not None:
        normalizer = Normalizer(np.array(spec.mean), np.array(spec.std))
    else:
        normalizer = Normalizer.from_images(train.images)
    train.normalizer = test.normalizer = normalizer
    logger.info(
        "Dataset %s: %d train / %d test images of shape %s, %d classes",
        spec.source,
        len(train),
        len(test),
        train.image_shape,
        spec.classes,
    )
    return train, test
