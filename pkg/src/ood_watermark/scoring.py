"""OOD scoring functions and the thresholded detector.

Higher scores mean "more in-distribution". Every scorer works on a model and raw
inputs, so the same scorer can judge inputs with or without a watermark, whatever
objective that watermark was learned with.
"""

from __future__ import annotations

import dataclasses
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.special import softmax

from .const import DEFAULT_ENERGY_TEMPERATURE, DEFAULT_ODIN_MAGNITUDE, DEFAULT_ODIN_TEMPERATURE, DEFAULT_REACT_QUANTILE
from .data import LabeledDataset
from .errors import OodWatermarkInvalidArgumentError, OodWatermarkStateError
from .losses import CrossEntropyLoss, log_partition
from .model import MlpModel
from .tensor import FloatArray

_LOGGER = logging.getLogger(__name__)

LOSS_FAMILY_SOFTMAX = "softmax"
LOSS_FAMILY_FREE_ENERGY = "free_energy"

Score = FloatArray | float


def _as_batch(x: npt.ArrayLike) -> tuple[FloatArray, bool]:
    array = np.asarray(x)
    if array.dtype != np.float64:
        array = array.astype(np.float32)
    return (array.reshape(1, -1), True) if array.ndim == 1 else (array, False)


def _finish(scores: FloatArray, vector: bool) -> Score:
    return float(scores[0]) if vector else np.asarray(scores, dtype=np.float64)


def max_softmax(logits: FloatArray, temperature: float = 1.0) -> FloatArray:
    """Row-wise max_k softmax_k(f / T)."""
    if temperature <= 0:
        raise OodWatermarkInvalidArgumentError(f"temperature must be > 0, got {temperature}")
    return np.asarray(np.max(softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1), axis=1))


def free_energy(logits: FloatArray, temperature: float = DEFAULT_ENERGY_TEMPERATURE) -> FloatArray:
    """Row-wise log sum_k exp(f_k / T), without a leading T factor."""
    return log_partition(np.asarray(logits, dtype=np.float64), temperature)


def max_logit(logits: FloatArray) -> FloatArray:
    return np.max(np.asarray(logits, dtype=np.float64), axis=1)


def odin_perturb(
    model: MlpModel,
    x: npt.ArrayLike,
    magnitude: float,
    labels: npt.ArrayLike | None = None,
) -> FloatArray:
    """x - magnitude * sign(-grad_x log softmax_y f(x)); y defaults to the predicted class."""
    if magnitude < 0:
        raise OodWatermarkInvalidArgumentError(f"perturbation magnitude must be >= 0, got {magnitude}")
    batch, vector = _as_batch(x)
    cache = model.forward_pass(batch)
    target = np.argmax(cache.logits, axis=1) if labels is None else np.atleast_1d(np.asarray(labels, np.int64))
    # -grad log softmax_y is the cross-entropy gradient
    ascent = model.backward(cache, CrossEntropyLoss()(cache.logits, target).grad).inputs
    perturbed = batch - np.asarray(magnitude, dtype=batch.dtype) * np.sign(ascent)
    return perturbed[0] if vector else perturbed


class Scorer(ABC):
    """A scoring function s(x; f)."""

    kind: str

    @abstractmethod
    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        """Score one input (returns a float) or a batch (returns an array)."""

    @property
    @abstractmethod
    def loss_family(self) -> str:
        """Watermark objective family this scorer is learned with."""

    @property
    def name(self) -> str:
        return self.kind

    def fitted(self, model: MlpModel, id_data: LabeledDataset) -> Scorer:
        """A copy with any data-dependent state fitted; stateless scorers return themselves."""
        return self


@dataclass(frozen=True)
class SoftmaxScorer(Scorer):
    kind = "softmax"

    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        batch, vector = _as_batch(x)
        return _finish(self.score_logits(model.logits(batch)), vector)

    def score_logits(self, logits: FloatArray) -> FloatArray:
        return max_softmax(logits)

    @property
    def loss_family(self) -> str:
        return LOSS_FAMILY_SOFTMAX


@dataclass(frozen=True)
class FreeEnergyScorer(Scorer):
    temperature: float = DEFAULT_ENERGY_TEMPERATURE
    kind = "free_energy"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise OodWatermarkInvalidArgumentError(f"temperature must be > 0, got {self.temperature}")

    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        batch, vector = _as_batch(x)
        return _finish(self.score_logits(model.logits(batch)), vector)

    def score_logits(self, logits: FloatArray) -> FloatArray:
        return free_energy(logits, self.temperature)

    @property
    def loss_family(self) -> str:
        return LOSS_FAMILY_FREE_ENERGY


@dataclass(frozen=True)
class MaxLogitScorer(Scorer):
    kind = "maxlogit"

    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        batch, vector = _as_batch(x)
        return _finish(max_logit(model.logits(batch)), vector)

    @property
    def loss_family(self) -> str:
        return LOSS_FAMILY_SOFTMAX


@dataclass(frozen=True)
class OdinScorer(Scorer):
    magnitude: float = DEFAULT_ODIN_MAGNITUDE
    temperature: float = DEFAULT_ODIN_TEMPERATURE
    kind = "odin"

    def __post_init__(self) -> None:
        if self.magnitude < 0:
            raise OodWatermarkInvalidArgumentError(f"magnitude must be >= 0, got {self.magnitude}")
        if self.temperature <= 0:
            raise OodWatermarkInvalidArgumentError(f"temperature must be > 0, got {self.temperature}")

    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        batch, vector = _as_batch(x)
        perturbed = odin_perturb(model, batch, self.magnitude)
        return _finish(max_softmax(model.logits(perturbed), self.temperature), vector)

    @property
    def loss_family(self) -> str:
        return LOSS_FAMILY_SOFTMAX


@dataclass(frozen=True)
class ReActScorer(Scorer):
    """Base scorer on logits recomputed from penultimate features clamped at `threshold`."""

    base: SoftmaxScorer | FreeEnergyScorer = dataclasses.field(default_factory=FreeEnergyScorer)
    clamp_quantile: float = DEFAULT_REACT_QUANTILE
    threshold: float | None = None
    kind = "react"

    def __post_init__(self) -> None:
        if not 0.0 < self.clamp_quantile <= 1.0:
            raise OodWatermarkInvalidArgumentError(f"clamp_quantile must lie in (0, 1], got {self.clamp_quantile}")

    @property
    def name(self) -> str:
        return f"{self.kind}_{self.base.kind}"

    def fitted(self, model: MlpModel, id_data: LabeledDataset) -> ReActScorer:
        return dataclasses.replace(self, threshold=fit_react_threshold(model, id_data, self.clamp_quantile))

    def score(self, model: MlpModel, x: npt.ArrayLike) -> Score:
        if self.threshold is None:
            raise OodWatermarkStateError("ReAct clamp threshold has not been fitted")
        batch, vector = _as_batch(x)
        return _finish(self.base.score_logits(model.logits(batch, feature_clamp=self.threshold)), vector)

    @property
    def loss_family(self) -> str:
        return self.base.loss_family


def score_softmax(model: MlpModel, x: npt.ArrayLike) -> Score:
    return SoftmaxScorer().score(model, x)


def score_free_energy(model: MlpModel, x: npt.ArrayLike, temperature: float = DEFAULT_ENERGY_TEMPERATURE) -> Score:
    return FreeEnergyScorer(temperature).score(model, x)


def score_maxlogit(model: MlpModel, x: npt.ArrayLike) -> Score:
    return MaxLogitScorer().score(model, x)


def score_odin(
    model: MlpModel,
    x: npt.ArrayLike,
    magnitude: float = DEFAULT_ODIN_MAGNITUDE,
    temperature: float = DEFAULT_ODIN_TEMPERATURE,
) -> Score:
    return OdinScorer(magnitude, temperature).score(model, x)


def score_react(model: MlpModel, x: npt.ArrayLike, scorer: ReActScorer) -> Score:
    return scorer.score(model, x)


def fit_react_threshold(
    model: MlpModel, id_data: LabeledDataset, clamp_quantile: float = DEFAULT_REACT_QUANTILE
) -> float:
    """Linear-interpolated quantile of all penultimate activations over the ID data."""
    if id_data.size == 0:
        raise OodWatermarkInvalidArgumentError("cannot fit a clamp threshold on an empty activation pool")
    pool = np.asarray(model.features(id_data.inputs), dtype=np.float64).reshape(-1)
    threshold = float(np.quantile(pool, clamp_quantile, method="linear"))
    _LOGGER.debug("ReAct threshold %.6f at quantile %.3f of %d activations", threshold, clamp_quantile, pool.size)
    return threshold


@dataclass(frozen=True)
class Detector:
    """g(x) = 1 (in-distribution) iff s(x) >= threshold, else 0."""

    model: MlpModel
    scorer: Scorer
    threshold: float

    def decide(self, x: npt.ArrayLike) -> int | npt.NDArray[np.int64]:
        scores = self.scorer.score(self.model, x)
        if isinstance(scores, float):
            return int(scores >= self.threshold)
        return (scores >= self.threshold).astype(np.int64)


def decide(detector: Detector, x: npt.ArrayLike) -> int | npt.NDArray[np.int64]:
    return detector.decide(x)
