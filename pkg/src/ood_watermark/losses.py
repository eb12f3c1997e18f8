"""Per-sample losses over logit batches, each paired with its logit gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax, logsumexp, softmax

from .const import EXPONENT_CAP
from .errors import OodWatermarkInvalidArgumentError
from .tensor import FloatArray

Labels = npt.NDArray[np.int64]


@dataclass(frozen=True)
class LossOutput:
    """values[i] is the loss of row i; grad is d(sum of values)/d(logits)."""

    values: FloatArray
    grad: FloatArray

    @property
    def total(self) -> float:
        return float(np.sum(self.values, dtype=np.float64))


class LogitLoss(Protocol):
    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput: ...


def _require_labels(logits: FloatArray, labels: Labels | None) -> Labels:
    if labels is None:
        raise OodWatermarkInvalidArgumentError("this loss needs class labels")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise OodWatermarkInvalidArgumentError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise OodWatermarkInvalidArgumentError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def _require_temperature(temperature: float) -> None:
    if temperature <= 0:
        raise OodWatermarkInvalidArgumentError(f"temperature must be > 0, got {temperature}")


@dataclass(frozen=True)
class CrossEntropyLoss:
    """-log softmax_y f(x)."""

    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput:
        labels = _require_labels(logits, labels)
        rows = np.arange(logits.shape[0])
        values = -log_softmax(logits, axis=1)[rows, labels]
        grad = softmax(logits, axis=1)
        grad[rows, labels] -= 1.0
        return LossOutput(values, grad)


@dataclass(frozen=True)
class UniformCrossEntropyLoss:
    """-(1/c) sum_k log softmax_k f(x); minimal (log c) when all logits agree."""

    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput:
        classes = logits.shape[1]
        values = -np.mean(log_softmax(logits, axis=1), axis=1)
        grad = softmax(logits, axis=1) - 1.0 / classes
        return LossOutput(values, grad)


def _capped_exp(argument: FloatArray) -> tuple[FloatArray, FloatArray]:
    """exp(min(a, cap)) and its derivative w.r.t. a (zero where the cap binds)."""
    capped = np.minimum(argument, EXPONENT_CAP)
    value = np.exp(capped)
    return value, np.where(argument < EXPONENT_CAP, value, 0.0)


@dataclass(frozen=True)
class EnergyIdLoss:
    """sum_k exp(-f_k(x) / T1)."""

    temperature: float = 1.0

    def __post_init__(self) -> None:
        _require_temperature(self.temperature)

    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput:
        terms, slope = _capped_exp(-logits / self.temperature)
        return LossOutput(np.sum(terms, axis=1), -slope / self.temperature)


@dataclass(frozen=True)
class EnergyOodLoss:
    """sum_k exp(f_k(x) / T2)."""

    temperature: float = 1.0

    def __post_init__(self) -> None:
        _require_temperature(self.temperature)

    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput:
        terms, slope = _capped_exp(logits / self.temperature)
        return LossOutput(np.sum(terms, axis=1), slope / self.temperature)


@dataclass(frozen=True)
class LogitSelectLoss:
    """The raw logit of one class; a linear loss for gradient checks."""

    index: int

    def __call__(self, logits: FloatArray, labels: Labels | None = None) -> LossOutput:
        grad = np.zeros_like(logits)
        grad[:, self.index] = 1.0
        return LossOutput(logits[:, self.index].copy(), grad)


def log_partition(logits: FloatArray, temperature: float = 1.0) -> FloatArray:
    """Row-wise log sum_k exp(f_k / T)."""
    _require_temperature(temperature)
    return np.asarray(logsumexp(logits / temperature, axis=1))
