"""Tiny configurations and datasets shared across the test modules."""

import numpy as np
import pytest

from src.config import RunConfig
from src.data.synthetic import synth_dataset

TINY = {
    "seed": 0,
    "network": {"cells": 2, "init_channels": 2, "projection_hidden": 8, "projection_out": 4},
    "search": {"max_epochs": 5, "batch_size": 8},
    "dataset": {"classes": 2, "train_samples": 32, "test_samples": 16, "image_size": 8, "noise": 0.1},
    "train": {"epochs": 1, "batch_size": 8, "pretrain_epochs": 1},
    "probe": {"epochs": 2, "batch_size": 8},
}


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(**TINY)


@pytest.fixture
def tiny_data():
    train = synth_dataset(2, 32, size=8, noise=0.1, seed=0, template_seed=0)
    test = synth_dataset(2, 16, size=8, noise=0.1, seed=1, template_seed=0)
    return train, test


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
