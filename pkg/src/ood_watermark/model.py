"""Fully-connected ReLU classifier with hand-written reverse-mode gradients."""

from __future__ import annotations

import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from .const import (
    ACTIVATION_IDENTITY,
    ACTIVATION_RELU,
    CHECKPOINT_MAGIC,
    DEFAULT_BATCH_SIZE,
    DEFAULT_MOMENTUM,
    DEFAULT_TRAIN_EPOCHS,
    DEFAULT_TRAIN_LR,
)
from .errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError
from .losses import CrossEntropyLoss, Labels, LogitLoss, UniformCrossEntropyLoss
from .tensor import FloatArray, SeededRng, ensure_finite

if TYPE_CHECKING:
    from .data import LabeledDataset

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum settings; lr is divided by 10 at each epoch in lr_decay_epochs."""

    epochs: int = DEFAULT_TRAIN_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_TRAIN_LR
    momentum: float = DEFAULT_MOMENTUM
    lr_decay_epochs: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise OodWatermarkInvalidArgumentError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise OodWatermarkInvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise OodWatermarkInvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise OodWatermarkInvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class ForwardCache:
    """Everything the backward pass needs from one forward pass."""

    layer_inputs: tuple[FloatArray, ...]
    pre_activations: tuple[FloatArray, ...]
    logits: FloatArray
    clamp_mask: FloatArray | None = None

    @property
    def features(self) -> FloatArray:
        """Input of the logit layer (after the optional clamp)."""
        return self.layer_inputs[-1]


@dataclass(frozen=True)
class Gradients:
    inputs: FloatArray
    weights: tuple[FloatArray, ...]
    biases: tuple[FloatArray, ...]


@dataclass(frozen=True)
class TrainingResult:
    model: MlpModel
    loss_trace: list[float] = field(default_factory=list)


def _forward(
    weights: Sequence[FloatArray],
    biases: Sequence[FloatArray],
    x: FloatArray,
    feature_clamp: float | None = None,
) -> ForwardCache:
    layer_inputs: list[FloatArray] = []
    pre_activations: list[FloatArray] = []
    activation = x
    clamp_mask: FloatArray | None = None
    last = len(weights) - 1
    for index, (weight, bias) in enumerate(zip(weights, biases)):
        if index == last and feature_clamp is not None:
            clamp_mask = (activation <= feature_clamp).astype(activation.dtype)
            activation = np.minimum(activation, np.asarray(feature_clamp, dtype=activation.dtype))
        layer_inputs.append(activation)
        z = activation @ weight.T + bias
        if index == last:
            return ForwardCache(tuple(layer_inputs), tuple(pre_activations), z, clamp_mask)
        pre_activations.append(z)
        activation = np.maximum(z, 0)
    raise AssertionError("a model has at least one layer")


def _backward(weights: Sequence[FloatArray], cache: ForwardCache, dlogits: FloatArray) -> Gradients:
    grad_weights: list[FloatArray] = []
    grad_biases: list[FloatArray] = []
    delta = dlogits
    for index in range(len(weights) - 1, -1, -1):
        layer_input = cache.layer_inputs[index]
        grad_weights.append(delta.T @ layer_input)
        grad_biases.append(np.sum(delta, axis=0))
        upstream = delta @ weights[index]
        if index == len(weights) - 1 and cache.clamp_mask is not None:
            upstream = upstream * cache.clamp_mask
        if index > 0:
            # ReLU subgradient is 0 at exactly 0
            upstream = upstream * (cache.pre_activations[index - 1] > 0)
        delta = upstream
    return Gradients(delta, tuple(reversed(grad_weights)), tuple(reversed(grad_biases)))


def _as_batch(x: npt.ArrayLike, input_dim: int) -> tuple[FloatArray, bool]:
    array = np.asarray(x)
    if array.dtype != np.float64:
        array = array.astype(np.float32)
    vector = array.ndim == 1
    batch = array.reshape(1, -1) if vector else array
    if batch.ndim != 2 or batch.shape[1] != input_dim:
        raise OodWatermarkInvalidArgumentError(f"expected inputs of dimension {input_dim}, got shape {array.shape}")
    ensure_finite(batch, "model input")
    return batch, vector


class MlpModel:
    """ReLU multilayer perceptron with an identity logit layer.

    Parameters are read-only; training returns a new model.
    """

    def __init__(
        self,
        weights: Sequence[npt.ArrayLike],
        biases: Sequence[npt.ArrayLike],
        dtype: npt.DTypeLike = np.float32,
    ) -> None:
        if not weights or len(weights) != len(biases):
            raise OodWatermarkInvalidArgumentError("need one bias vector per weight matrix and at least one layer")
        frozen_weights = []
        frozen_biases = []
        for index, (weight, bias) in enumerate(zip(weights, biases)):
            w = np.array(weight, dtype=dtype)
            b = np.array(bias, dtype=dtype)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise OodWatermarkInvalidArgumentError(
                    f"layer {index}: weight {w.shape} and bias {b.shape} are inconsistent"
                )
            if frozen_weights and frozen_weights[-1].shape[0] != w.shape[1]:
                raise OodWatermarkInvalidArgumentError(
                    f"layer {index} expects {w.shape[1]} inputs, previous layer emits {frozen_weights[-1].shape[0]}"
                )
            ensure_finite(w, f"layer {index} weights")
            ensure_finite(b, f"layer {index} biases")
            w.flags.writeable = False
            b.flags.writeable = False
            frozen_weights.append(w)
            frozen_biases.append(b)
        self.weights: tuple[FloatArray, ...] = tuple(frozen_weights)
        self.biases: tuple[FloatArray, ...] = tuple(frozen_biases)

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], seed: int) -> MlpModel:
        """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)) and zero biases."""
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise OodWatermarkInvalidArgumentError(f"layer_dims must hold >= 2 positive sizes, got {dims}")
        rng = SeededRng(seed)
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform((fan_out, fan_in), -limit, limit))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def class_count(self) -> int:
        return int(self.weights[-1].shape[0])

    def astype(self, dtype: npt.DTypeLike) -> MlpModel:
        return MlpModel(self.weights, self.biases, dtype=dtype)

    def flat_parameters(self) -> FloatArray:
        """Weights then bias of each layer, concatenated."""
        return np.concatenate([part.reshape(-1) for w, b in zip(self.weights, self.biases) for part in (w, b)])

    def with_flat_parameters(self, flat: npt.ArrayLike) -> MlpModel:
        values = np.asarray(flat)
        weights = []
        biases = []
        offset = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(values[offset : offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(values[offset : offset + b.size])
            offset += b.size
        if offset != values.size:
            raise OodWatermarkInvalidArgumentError(f"expected {offset} parameters, got {values.size}")
        return MlpModel(weights, biases, dtype=values.dtype)

    def forward_pass(self, x: npt.ArrayLike, feature_clamp: float | None = None) -> ForwardCache:
        batch, _ = _as_batch(x, self.input_dim)
        return _forward(self.weights, self.biases, batch, feature_clamp)

    def backward(self, cache: ForwardCache, dlogits: FloatArray) -> Gradients:
        return _backward(self.weights, cache, dlogits)

    def logits(self, x: npt.ArrayLike, feature_clamp: float | None = None) -> FloatArray:
        batch, vector = _as_batch(x, self.input_dim)
        logits = _forward(self.weights, self.biases, batch, feature_clamp).logits
        return logits[0] if vector else logits

    def features(self, x: npt.ArrayLike) -> FloatArray:
        """Penultimate activations, i.e. the input of the logit layer."""
        batch, vector = _as_batch(x, self.input_dim)
        features = _forward(self.weights, self.biases, batch).features
        return features[0] if vector else features

    def head(self, features: npt.ArrayLike) -> FloatArray:
        """Logit layer applied to penultimate features."""
        array = np.asarray(features, dtype=self.weights[-1].dtype)
        return array @ self.weights[-1].T + self.biases[-1]

    def predict(self, x: npt.ArrayLike) -> npt.NDArray[np.int64]:
        return np.argmax(self.logits(x), axis=-1).astype(np.int64)

    def __repr__(self) -> str:
        return f"MlpModel(layer_dims={self.layer_dims})"


def forward(model: MlpModel, x: npt.ArrayLike) -> FloatArray:
    return model.logits(x)


def input_gradient(
    model: MlpModel,
    x: npt.ArrayLike,
    loss: LogitLoss,
    labels: npt.ArrayLike | None = None,
    feature_clamp: float | None = None,
) -> FloatArray:
    """Gradient of the summed loss w.r.t. the inputs, shaped like x."""
    batch, vector = _as_batch(x, model.input_dim)
    cache = _forward(model.weights, model.biases, batch, feature_clamp)
    output = loss(cache.logits, None if labels is None else np.atleast_1d(np.asarray(labels, dtype=np.int64)))
    grad = _backward(model.weights, cache, output.grad).inputs
    return grad[0] if vector else grad


def parameter_gradients(
    model: MlpModel, x: npt.ArrayLike, loss: LogitLoss, labels: npt.ArrayLike | None = None
) -> Gradients:
    batch, _ = _as_batch(x, model.input_dim)
    cache = _forward(model.weights, model.biases, batch)
    output = loss(cache.logits, None if labels is None else np.atleast_1d(np.asarray(labels, dtype=np.int64)))
    return _backward(model.weights, cache, output.grad)


def accuracy(model: MlpModel, data: LabeledDataset) -> float:
    if data.size == 0:
        return 0.0
    return float(np.mean(model.predict(data.inputs) == data.labels))


def _run_sgd(
    model: MlpModel,
    data: LabeledDataset,
    cfg: TrainConfig,
    outliers: FloatArray | None = None,
    outlier_weight: float = 0.0,
) -> TrainingResult:
    if data.size == 0:
        raise OodWatermarkInvalidArgumentError("cannot train on an empty dataset")
    if data.input_dim != model.input_dim:
        raise OodWatermarkInvalidArgumentError(f"dataset dimension {data.input_dim} != model input {model.input_dim}")
    if np.any(data.labels >= model.class_count):
        raise OodWatermarkInvalidArgumentError(f"labels must lie in [0, {model.class_count})")
    if outliers is not None and (outliers.ndim != 2 or outliers.shape[1] != model.input_dim or len(outliers) == 0):
        raise OodWatermarkInvalidArgumentError(f"outliers must be a non-empty (N, {model.input_dim}) array")

    weights = [np.array(w) for w in model.weights]
    biases = [np.array(b) for b in model.biases]
    velocity_w = [np.zeros_like(w) for w in weights]
    velocity_b = [np.zeros_like(b) for b in biases]
    rng = SeededRng(cfg.seed)
    outlier_rng = SeededRng.derive(cfg.seed, "outliers")
    id_loss = CrossEntropyLoss()
    outlier_loss = UniformCrossEntropyLoss()
    inputs = data.inputs.astype(weights[0].dtype)
    labels: Labels = data.labels
    lr = cfg.lr
    trace: list[float] = []

    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            lr /= 10.0
        order = rng.permutation(data.size)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, data.size, cfg.batch_size):
            index = order[start : start + cfg.batch_size]
            count = len(index)
            cache = _forward(weights, biases, inputs[index])
            output = id_loss(cache.logits, labels[index])
            grads = _backward(weights, cache, output.grad / count)
            batch_loss = output.total / count
            grad_w = list(grads.weights)
            grad_b = list(grads.biases)
            if outliers is not None:
                picked = outliers[outlier_rng.integers(len(outliers), count)].astype(weights[0].dtype)
                out_cache = _forward(weights, biases, picked)
                out_output = outlier_loss(out_cache.logits)
                out_grads = _backward(weights, out_cache, out_output.grad / count)
                batch_loss += outlier_weight * out_output.total / count
                grad_w = [g + outlier_weight * o for g, o in zip(grad_w, out_grads.weights)]
                grad_b = [g + outlier_weight * o for g, o in zip(grad_b, out_grads.biases)]
            for layer in range(len(weights)):
                velocity_w[layer] = cfg.momentum * velocity_w[layer] + grad_w[layer]
                velocity_b[layer] = cfg.momentum * velocity_b[layer] + grad_b[layer]
                weights[layer] -= lr * velocity_w[layer]
                biases[layer] -= lr * velocity_b[layer]
            epoch_loss += batch_loss
            batches += 1
        trace.append(epoch_loss / batches)
        _LOGGER.debug("epoch %d/%d: loss %.6f (lr %.5g)", epoch + 1, cfg.epochs, trace[-1], lr)

    return TrainingResult(MlpModel(weights, biases, dtype=weights[0].dtype), trace)


def train_classifier(model: MlpModel, data: LabeledDataset, cfg: TrainConfig) -> TrainingResult:
    """Mean cross-entropy SGD with momentum; shuffles every epoch with cfg.seed."""
    result = _run_sgd(model, data, cfg)
    if result.loss_trace:
        _LOGGER.info(
            "trained %s for %d epochs, loss %.4f -> %.4f",
            model,
            cfg.epochs,
            result.loss_trace[0],
            result.loss_trace[-1],
        )
    return result


def fine_tune_oe(
    model: MlpModel,
    id_data: LabeledDataset,
    outliers: npt.ArrayLike,
    cfg: TrainConfig,
    weight: float,
) -> TrainingResult:
    """Outlier exposure: mean CE on ID data plus weight * mean uniform CE on outliers."""
    outlier_array = np.asarray(outliers)
    if outlier_array.ndim == 1:
        outlier_array = outlier_array.reshape(1, -1)
    if weight < 0:
        raise OodWatermarkInvalidArgumentError(f"outlier weight must be >= 0, got {weight}")
    result = _run_sgd(model, id_data, cfg, outlier_array, weight)
    _LOGGER.info("outlier exposure fine-tuning finished after %d epochs (lambda=%g)", cfg.epochs, weight)
    return result


_U32 = struct.Struct("<I")


def save_checkpoint(model: MlpModel) -> bytes:
    """WMK1 layout: magic, u32 layer count, then per layer out, in, activation, weights, biases."""
    chunks = [CHECKPOINT_MAGIC, _U32.pack(len(model.weights))]
    last = len(model.weights) - 1
    for index, (weight, bias) in enumerate(zip(model.weights, model.biases)):
        activation = ACTIVATION_IDENTITY if index == last else ACTIVATION_RELU
        chunks.append(struct.pack("<III", weight.shape[0], weight.shape[1], activation))
        chunks.append(np.ascontiguousarray(weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def _read(buffer: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buffer):
        raise OodWatermarkFormatError(f"truncated checkpoint while reading {what}", offset)
    return buffer[offset : offset + size]


def load_checkpoint(buffer: bytes) -> MlpModel:
    if _read(buffer, 0, 4, "magic") != CHECKPOINT_MAGIC:
        raise OodWatermarkFormatError("bad checkpoint magic", 0)
    (layer_count,) = _U32.unpack(_read(buffer, 4, 4, "layer count"))
    if layer_count < 1:
        raise OodWatermarkFormatError("checkpoint declares no layers", 4)
    offset = 8
    weights = []
    biases = []
    for index in range(layer_count):
        header_offset = offset
        out_dim, in_dim, activation = struct.unpack("<III", _read(buffer, offset, 12, f"layer {index} header"))
        offset += 12
        if out_dim < 1 or in_dim < 1:
            raise OodWatermarkFormatError(f"layer {index} has empty dimensions", header_offset)
        if weights and weights[-1].shape[0] != in_dim:
            raise OodWatermarkFormatError(
                f"layer {index} expects {in_dim} inputs, previous layer emits {weights[-1].shape[0]}", header_offset
            )
        expected = ACTIVATION_IDENTITY if index == layer_count - 1 else ACTIVATION_RELU
        if activation != expected:
            raise OodWatermarkFormatError(f"layer {index} has activation tag {activation}", header_offset + 8)
        weight_bytes = _read(buffer, offset, 4 * out_dim * in_dim, f"layer {index} weights")
        offset += len(weight_bytes)
        bias_bytes = _read(buffer, offset, 4 * out_dim, f"layer {index} biases")
        offset += len(bias_bytes)
        weights.append(np.frombuffer(weight_bytes, dtype="<f4").reshape(out_dim, in_dim))
        biases.append(np.frombuffer(bias_bytes, dtype="<f4"))
    if offset != len(buffer):
        raise OodWatermarkFormatError(f"{len(buffer) - offset} trailing bytes after checkpoint", offset)
    return MlpModel(weights, biases)
