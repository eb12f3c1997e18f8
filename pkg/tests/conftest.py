"""Shared fixtures: tiny models and a separable Gaussian-blobs task."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import numpy.typing as npt
import pytest

from ood_watermark.data import GaussianBlobs, LabeledDataset, make_synthetic
from ood_watermark.model import MlpModel, TrainConfig, train_classifier
from ood_watermark.tensor import SeededRng

LinearFactory = Callable[..., MlpModel]


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(1234)


@pytest.fixture
def linear_model() -> LinearFactory:
    """Single identity-activation layer: logits = W x + b."""

    def build(weight: npt.ArrayLike, bias: npt.ArrayLike | None = None) -> MlpModel:
        w = np.asarray(weight, dtype=np.float32)
        b = np.zeros(w.shape[0], dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
        return MlpModel([w], [b])

    return build


@pytest.fixture
def constant_logits(linear_model: LinearFactory) -> Callable[[npt.ArrayLike, int], MlpModel]:
    """A model that emits the given logits for every input of dimension d."""

    def build(logits: npt.ArrayLike, input_dim: int = 2) -> MlpModel:
        values = np.asarray(logits, dtype=np.float32)
        return linear_model(np.zeros((values.size, input_dim)), values)

    return build


def _blobs(seed: int, input_dim: int) -> tuple[LabeledDataset, LabeledDataset]:
    task = GaussianBlobs(class_count=2, input_dim=input_dim, separation=10.0)
    data_rng = SeededRng(seed)
    train = make_synthetic(task, 400, data_rng)
    test = make_synthetic(task, 200, data_rng)
    assert isinstance(train, LabeledDataset) and isinstance(test, LabeledDataset)
    return train, test


@pytest.fixture(scope="session")
def blobs_task() -> tuple[MlpModel, LabeledDataset, LabeledDataset]:
    """A 2-16-2 classifier trained on two blobs at distance 10, with its train and test splits."""
    train, test = _blobs(seed=5, input_dim=2)
    cfg = TrainConfig(epochs=30, batch_size=32, lr=0.01, momentum=0.9, seed=0)
    model = train_classifier(MlpModel.initialize([2, 16, 2], seed=3), train, cfg).model
    return model, train, test
