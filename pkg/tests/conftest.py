"""Pytest fixtures to use for testing."""

from dataclasses import dataclass
from typing import List

import numpy as np
import pytest

from exnorm.data import LabeledSet, SyntheticSource, gen_synthetic
from exnorm.network import Network, build_micro_cnn
from exnorm.ratios import RatioRecord
from exnorm.trainer import History, LRSchedule, TrainConfig, train


@dataclass
class TrainedRun:
    """A micro-CNN+EN trained on the seeded synthetic set."""

    model: Network
    data: LabeledSet
    history: History

    @property
    def ratios(self) -> List[RatioRecord]:
        return self.history.ratios


# The shared run: 300 samples of 3 classes for 30 epochs at 64-bit.
RUN_EPOCHS = 30
RUN_CONFIG = TrainConfig(
    epochs=RUN_EPOCHS,
    batch_size=32,
    schedule=LRSchedule(lr=0.1, warmup_epochs=1),
    momentum=0.9,
    seed=0,
    record_ratios=True,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def synthetic() -> LabeledSet:
    """A small 64-bit synthetic set: 3 classes of 8 samples."""
    return gen_synthetic(
        SyntheticSource(classes=3, per_class=8, image_size=8), np.float64
    )


@pytest.fixture(scope="session")
def trained_en() -> TrainedRun:
    """Train once per session; several suites inspect the same run."""
    data = gen_synthetic(
        SyntheticSource(classes=3, per_class=100, image_size=16, seed=0),
        np.float64,
    )
    model = build_micro_cnn("en", classes=3, seed=0, dtype=np.float64)
    history = train(model, data, RUN_CONFIG)
    return TrainedRun(model, data, history)
