"""Learning a universal input-space watermark for a fixed classifier.

The watermark w is trained by signed-gradient descent with a sharpness-aware perturbation:
each step evaluates the risk gradient at w, moves to w + kappa inside an L2 ball of
radius rho, and updates w with the sign of the gradient found there. The model is
only read; its parameters never change.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import numpy.typing as npt

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_SAM_P,
    DEFAULT_SAM_Q,
    DEFAULT_SIGMA2,
    DEFAULT_STEP_SIZE,
    DEFAULT_WATERMARK_DECAY_EPOCHS,
    DEFAULT_WATERMARK_EPOCHS,
    FREE_ENERGY_DEFAULTS,
    SOFTMAX_DEFAULTS,
    WATERMARK_MAGIC,
)
from .data import LabeledDataset, Shift, shift_normalized
from .errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError
from .losses import (
    CrossEntropyLoss,
    EnergyIdLoss,
    EnergyOodLoss,
    Labels,
    LogitLoss,
    UniformCrossEntropyLoss,
)
from .model import MlpModel
from .scoring import LOSS_FAMILY_FREE_ENERGY, LOSS_FAMILY_SOFTMAX, odin_perturb
from .tensor import FloatArray, SeededRng, Tensor, as_tensor, sample_gaussian

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftmaxObjective:
    """Cross-entropy on watermarked ID data, uniform cross-entropy on negatives."""

    kind = LOSS_FAMILY_SOFTMAX

    @property
    def id_loss(self) -> LogitLoss:
        return CrossEntropyLoss()

    @property
    def ood_loss(self) -> LogitLoss:
        return UniformCrossEntropyLoss()

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class FreeEnergyObjective:
    """sum_k exp(-f_k/T1) on watermarked ID data, sum_k exp(f_k/T2) on negatives."""

    t1: float = FREE_ENERGY_DEFAULTS["t1"]
    t2: float = FREE_ENERGY_DEFAULTS["t2"]
    kind = LOSS_FAMILY_FREE_ENERGY

    def __post_init__(self) -> None:
        if self.t1 <= 0 or self.t2 <= 0:
            raise OodWatermarkInvalidArgumentError(f"T1 and T2 must be > 0, got {self.t1}, {self.t2}")

    @property
    def id_loss(self) -> LogitLoss:
        return EnergyIdLoss(self.t1)

    @property
    def ood_loss(self) -> LogitLoss:
        return EnergyOodLoss(self.t2)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "t1": self.t1, "t2": self.t2}


Objective = SoftmaxObjective | FreeEnergyObjective


@dataclass(frozen=True)
class GaussianNoise:
    """Negatives are N(0, sigma1) draws."""

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "gaussian"}


@dataclass(frozen=True, eq=False)
class OutlierSet:
    """Negatives are rows drawn uniformly from a held-out outlier set."""

    data: Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] == 0:
            raise OodWatermarkInvalidArgumentError("outlier set must be a non-empty (N, d) array")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "outliers", "count": int(self.data.shape[0])}


@dataclass(frozen=True)
class AugmentedId:
    """Gaussian negatives plus shifted copies of the current ID batch."""

    kinds: tuple[Shift, ...] = (Shift.PERMUTE, Shift.ROTATE)

    def __post_init__(self) -> None:
        if not self.kinds:
            raise OodWatermarkInvalidArgumentError("at least one shifting augmentation is required")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "augmented", "kinds": [Shift(k).value for k in self.kinds]}


NegativeSource = GaussianNoise | OutlierSet | AugmentedId


@dataclass(frozen=True)
class WatermarkConfig:
    """Hyperparameters of one watermark training run.

    react_threshold and odin_magnitude route the objective through a ReAct-rectified
    model or ODIN-perturbed inputs when the watermark is learned for those scorers.
    """

    objective: Objective = field(default_factory=FreeEnergyObjective)
    beta: float = FREE_ENERGY_DEFAULTS["beta"]
    sigma1: float = FREE_ENERGY_DEFAULTS["sigma1"]
    sigma2: float = DEFAULT_SIGMA2
    rho: float = FREE_ENERGY_DEFAULTS["rho"]
    step_size: float = DEFAULT_STEP_SIZE
    epochs: int = DEFAULT_WATERMARK_EPOCHS
    lr_decay_epochs: tuple[int, ...] = DEFAULT_WATERMARK_DECAY_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    negative_source: NegativeSource = field(default_factory=GaussianNoise)
    seed: int = 0
    sam_p: float = DEFAULT_SAM_P
    sam_q: float = DEFAULT_SAM_Q
    react_threshold: float | None = None
    odin_magnitude: float | None = None

    def __post_init__(self) -> None:
        for name in ("beta", "sigma1", "sigma2", "rho"):
            if getattr(self, name) < 0:
                raise OodWatermarkInvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.step_size <= 0:
            raise OodWatermarkInvalidArgumentError(f"step_size must be > 0, got {self.step_size}")
        if self.epochs < 0 or self.batch_size < 1:
            raise OodWatermarkInvalidArgumentError("epochs must be >= 0 and batch_size >= 1")
        if self.odin_magnitude is not None and self.odin_magnitude < 0:
            raise OodWatermarkInvalidArgumentError(f"odin_magnitude must be >= 0, got {self.odin_magnitude}")

    @classmethod
    def defaults_for(cls, objective: Objective, **overrides: Any) -> WatermarkConfig:
        """Searched defaults of the objective family, then any explicit overrides."""
        table = SOFTMAX_DEFAULTS if isinstance(objective, SoftmaxObjective) else FREE_ENERGY_DEFAULTS
        values: dict[str, Any] = {k: table[k] for k in ("beta", "sigma1", "rho")}
        values.update(overrides)
        return cls(objective=objective, **values)

    def with_hyperparameter(self, name: str, value: float) -> WatermarkConfig:
        """Copy with one searchable hyperparameter (beta, sigma1, rho, t1, t2) replaced."""
        if name in ("t1", "t2"):
            if not isinstance(self.objective, FreeEnergyObjective):
                raise OodWatermarkInvalidArgumentError(f"{name} only applies to the free energy objective")
            return dataclasses.replace(self, objective=dataclasses.replace(self.objective, **{name: value}))
        if name not in ("beta", "sigma1", "rho"):
            raise OodWatermarkInvalidArgumentError(f"{name} is not a searchable hyperparameter")
        return dataclasses.replace(self, **{name: value})

    def hyperparameter(self, name: str) -> float:
        if name in ("t1", "t2"):
            if not isinstance(self.objective, FreeEnergyObjective):
                raise OodWatermarkInvalidArgumentError(f"{name} only applies to the free energy objective")
            return float(getattr(self.objective, name))
        return float(getattr(self, name))

    def to_dict(self) -> dict[str, Any]:
        return {
            "objective": self.objective.to_dict(),
            "beta": self.beta,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "rho": self.rho,
            "sam_p": self.sam_p,
            "sam_q": self.sam_q,
            "step_size": self.step_size,
            "epochs": self.epochs,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "batch_size": self.batch_size,
            "negative_source": self.negative_source.to_dict(),
            "react_threshold": self.react_threshold,
            "odin_magnitude": self.odin_magnitude,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class RiskBreakdown:
    """risk = loss_id + beta * loss_ood; both terms are per-batch sums."""

    risk: float
    loss_id: float
    loss_ood: float


@dataclass(frozen=True)
class EpochTrace:
    epoch: int
    risk: float
    loss_id: float
    loss_ood: float
    step_size: float


@dataclass(frozen=True)
class Watermark:
    w: Tensor
    config: WatermarkConfig
    trace: list[EpochTrace] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return int(self.w.shape[0])


@dataclass(frozen=True)
class NegativeBatch:
    """Negatives for one step: m noise/outlier rows, plus shifted ID rows for AugmentedId."""

    noise: Tensor
    augmented: Tensor | None = None


def loss_id_softmax(model: MlpModel, x: npt.ArrayLike, y: npt.ArrayLike) -> float:
    return CrossEntropyLoss()(np.atleast_2d(model.logits(x)), np.atleast_1d(np.asarray(y, np.int64))).total


def loss_ood_softmax(model: MlpModel, x: npt.ArrayLike) -> float:
    return UniformCrossEntropyLoss()(np.atleast_2d(model.logits(x))).total


def loss_id_fe(model: MlpModel, x: npt.ArrayLike, t1: float) -> float:
    return EnergyIdLoss(t1)(np.atleast_2d(model.logits(x))).total


def loss_ood_fe(model: MlpModel, x: npt.ArrayLike, t2: float) -> float:
    return EnergyOodLoss(t2)(np.atleast_2d(model.logits(x))).total


def _loss_term(
    model: MlpModel,
    inputs: FloatArray,
    loss: LogitLoss,
    cfg: WatermarkConfig,
    labels: Labels | None = None,
) -> tuple[float, FloatArray]:
    """Summed loss over the rows of `inputs` and its gradient w.r.t. a shared additive shift."""
    points = np.asarray(inputs, dtype=np.float64)
    if cfg.odin_magnitude is not None:
        # the sign term is piecewise constant, so d(x~)/dw is the identity almost everywhere
        points = odin_perturb(model, points, cfg.odin_magnitude, labels)
    cache = model.forward_pass(points, feature_clamp=cfg.react_threshold)
    output = loss(cache.logits, labels)
    grad = model.backward(cache, output.grad).inputs
    return output.total, np.sum(grad, axis=0, dtype=np.float64)


def _risk_and_gradient(
    model: MlpModel,
    x: FloatArray,
    y: Labels,
    negatives: NegativeBatch,
    w: FloatArray,
    cfg: WatermarkConfig,
) -> tuple[RiskBreakdown, FloatArray]:
    shift = np.asarray(w, dtype=np.float64)
    loss_id, grad_id = _loss_term(model, x + shift, cfg.objective.id_loss, cfg, y)
    loss_ood, grad_ood = _loss_term(model, negatives.noise + shift, cfg.objective.ood_loss, cfg)
    if negatives.augmented is not None:
        extra, grad_extra = _loss_term(model, negatives.augmented + shift, cfg.objective.ood_loss, cfg)
        loss_ood += extra
        grad_ood = grad_ood + grad_extra
    breakdown = RiskBreakdown(loss_id + cfg.beta * loss_ood, loss_id, loss_ood)
    return breakdown, grad_id + cfg.beta * grad_ood


def _check_batch(
    model: MlpModel, x: npt.ArrayLike, y: npt.ArrayLike, negatives: NegativeBatch, w: npt.ArrayLike
) -> tuple[FloatArray, Labels, Tensor]:
    inputs = np.atleast_2d(as_tensor(x, "ID batch"))
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    shift = as_tensor(w, "watermark")
    if shift.shape != (model.input_dim,) or inputs.shape[1] != model.input_dim:
        raise OodWatermarkInvalidArgumentError(
            f"watermark {shift.shape} and batch {inputs.shape} must match model input {model.input_dim}"
        )
    if negatives.noise.ndim != 2 or negatives.noise.shape[1] != model.input_dim:
        raise OodWatermarkInvalidArgumentError(f"negatives must be (m, {model.input_dim}), got {negatives.noise.shape}")
    return inputs, labels, shift


def total_risk(
    model: MlpModel,
    x: npt.ArrayLike,
    y: npt.ArrayLike,
    negatives: NegativeBatch,
    w: npt.ArrayLike,
    cfg: WatermarkConfig,
) -> RiskBreakdown:
    """Summed ID loss on x + w plus beta times summed OOD loss on negatives + w."""
    inputs, labels, shift = _check_batch(model, x, y, negatives, w)
    return _risk_and_gradient(model, inputs, labels, negatives, shift, cfg)[0]


def risk_gradient(
    model: MlpModel,
    x: npt.ArrayLike,
    y: npt.ArrayLike,
    negatives: NegativeBatch,
    w: npt.ArrayLike,
    cfg: WatermarkConfig,
) -> FloatArray:
    inputs, labels, shift = _check_batch(model, x, y, negatives, w)
    return _risk_and_gradient(model, inputs, labels, negatives, shift, cfg)[1]


def sam_perturbation(
    grad: npt.ArrayLike, rho: float, p: float = DEFAULT_SAM_P, q: float = DEFAULT_SAM_Q
) -> Tensor:
    """rho * sign(g) * |g|^(q-1) / (||g||_q^q)^(1/p); zero for rho = 0 or g = 0."""
    if rho < 0:
        raise OodWatermarkInvalidArgumentError(f"rho must be >= 0, got {rho}")
    if p <= 1 or q <= 1 or abs(1.0 / p + 1.0 / q - 1.0) > 1e-9:
        raise OodWatermarkInvalidArgumentError(f"p and q must be conjugate exponents, got p={p}, q={q}")
    g = np.asarray(grad, dtype=np.float64)
    magnitude = np.abs(g)
    norm_q = np.sum(magnitude**q)
    if rho == 0 or norm_q == 0:
        return np.zeros(g.shape, dtype=np.float32)
    kappa = rho * np.sign(g) * magnitude ** (q - 1) / norm_q ** (1.0 / p)
    return kappa.astype(np.float32)


Evaluation = Callable[[Tensor], tuple[RiskBreakdown | None, FloatArray]]


def _sam_step(
    w: Tensor, evaluate: Evaluation, rho: float, step_size: float, p: float, q: float
) -> tuple[Tensor, RiskBreakdown | None]:
    breakdown, grad = evaluate(w)
    if rho > 0:
        perturbed = (w + sam_perturbation(grad, rho, p, q)).astype(np.float32)
        _, grad = evaluate(perturbed)
    updated = w - np.float32(step_size) * np.sign(grad).astype(np.float32)
    return updated.astype(np.float32), breakdown


def signed_sam_update(
    w: npt.ArrayLike,
    gradient: Callable[[Tensor], FloatArray],
    rho: float,
    step_size: float,
    p: float = DEFAULT_SAM_P,
    q: float = DEFAULT_SAM_Q,
) -> Tensor:
    """One update w - step_size * sign(grad(w + kappa)) for an arbitrary gradient oracle."""
    updated, _ = _sam_step(as_tensor(w, "watermark"), lambda point: (None, gradient(point)), rho, step_size, p, q)
    return updated


def watermark_step(
    model: MlpModel,
    w: npt.ArrayLike,
    x: npt.ArrayLike,
    y: npt.ArrayLike,
    negatives: NegativeBatch,
    cfg: WatermarkConfig,
    step_size: float | None = None,
) -> Tensor:
    """One signed sharpness-aware update; `step_size` overrides the configured alpha."""
    alpha = cfg.step_size if step_size is None else step_size
    if alpha < 0:
        raise OodWatermarkInvalidArgumentError(f"step_size must be >= 0, got {alpha}")
    updated, _ = _watermark_step(model, w, x, y, negatives, cfg, alpha)
    return updated


def _watermark_step(
    model: MlpModel,
    w: npt.ArrayLike,
    x: npt.ArrayLike,
    y: npt.ArrayLike,
    negatives: NegativeBatch,
    cfg: WatermarkConfig,
    step_size: float,
) -> tuple[Tensor, RiskBreakdown]:
    inputs, labels, shift = _check_batch(model, x, y, negatives, w)

    def evaluate(point: Tensor) -> tuple[RiskBreakdown | None, FloatArray]:
        return _risk_and_gradient(model, inputs, labels, negatives, point, cfg)

    updated, breakdown = _sam_step(shift, evaluate, cfg.rho, step_size, cfg.sam_p, cfg.sam_q)
    assert breakdown is not None
    return updated, breakdown


def draw_negatives(
    rng: SeededRng, id_data: LabeledDataset, index: npt.NDArray[np.int64], cfg: WatermarkConfig
) -> NegativeBatch:
    """Fresh negatives for one step, as many as the ID batch."""
    count = len(index)
    source = cfg.negative_source
    if isinstance(source, OutlierSet):
        if source.data.shape[1] != id_data.input_dim:
            raise OodWatermarkInvalidArgumentError("outlier set dimension differs from the ID data")
        return NegativeBatch(source.data[rng.integers(source.data.shape[0], count)])
    noise = sample_gaussian(rng, (count, id_data.input_dim), 0.0, cfg.sigma1)
    if isinstance(source, AugmentedId):
        if id_data.spatial_shape is None:
            raise OodWatermarkInvalidArgumentError("shifting augmentations need ID data with a spatial shape")
        augmented = shift_normalized(
            id_data.inputs[index], id_data.spatial_shape, source.kinds, rng, id_data.stats
        )
        return NegativeBatch(noise, augmented)
    return NegativeBatch(noise)


def train_watermark(model: MlpModel, id_data: LabeledDataset, cfg: WatermarkConfig) -> Watermark:
    """Learn w from N(0, sigma2) initialisation; negatives are resampled every step."""
    if id_data.size == 0:
        raise OodWatermarkInvalidArgumentError("cannot learn a watermark from an empty ID dataset")
    if id_data.input_dim != model.input_dim:
        raise OodWatermarkInvalidArgumentError(
            f"ID data dimension {id_data.input_dim} != model input {model.input_dim}"
        )
    rng = SeededRng(cfg.seed)
    w = sample_gaussian(rng, model.input_dim, 0.0, cfg.sigma2)
    step_size = cfg.step_size
    trace: list[EpochTrace] = []
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            step_size /= 10.0
        order = rng.permutation(id_data.size)
        totals = np.zeros(3, dtype=np.float64)
        steps = 0
        for start in range(0, id_data.size, cfg.batch_size):
            index = order[start : start + cfg.batch_size]
            negatives = draw_negatives(rng, id_data, index, cfg)
            w, breakdown = _watermark_step(
                model, w, id_data.inputs[index], id_data.labels[index], negatives, cfg, step_size
            )
            totals += (breakdown.risk, breakdown.loss_id, breakdown.loss_ood)
            steps += 1
        risk, loss_id, loss_ood = (float(v) for v in totals / steps)
        trace.append(EpochTrace(epoch, risk, loss_id, loss_ood, step_size))
        _LOGGER.debug(
            "watermark epoch %d/%d: risk %.6g (id %.6g, ood %.6g)", epoch + 1, cfg.epochs, risk, loss_id, loss_ood
        )
    if trace:
        _LOGGER.info("learned watermark over %d epochs, risk %.6g -> %.6g", cfg.epochs, trace[0].risk, trace[-1].risk)
    return Watermark(w, cfg, trace)


def apply_watermark(w: npt.ArrayLike, x: npt.ArrayLike) -> Tensor:
    """x + w for one input or row-wise for a batch; no clamping to any pixel range."""
    shift = as_tensor(w, "watermark")
    inputs = as_tensor(x, "inputs")
    if shift.ndim != 1 or inputs.shape[-1] != shift.shape[0] or inputs.ndim > 2:
        raise OodWatermarkInvalidArgumentError(f"cannot add watermark {shift.shape} to inputs {inputs.shape}")
    return (inputs + shift).astype(np.float32)


class MaskMode(str, Enum):
    KEEP_LARGE = "keep_large"
    KEEP_SMALL = "keep_small"


def mask_watermark(w: npt.ArrayLike, mode: MaskMode | str, threshold: float) -> Tensor:
    """keep_large zeroes |w_i| < threshold; keep_small zeroes |w_i| > threshold (both inclusive keeps)."""
    if threshold < 0:
        raise OodWatermarkInvalidArgumentError(f"mask threshold must be >= 0, got {threshold}")
    values = as_tensor(w, "watermark")
    magnitude = np.abs(values)
    keep = magnitude >= threshold if MaskMode(mode) is MaskMode.KEEP_LARGE else magnitude <= threshold
    return np.where(keep, values, np.float32(0.0)).astype(np.float32)


def mask_threshold_at_percentile(w: npt.ArrayLike, percentile: float) -> float:
    """Percentile of |w|, the threshold used for percentile-style masks."""
    if not 0.0 <= percentile <= 100.0:
        raise OodWatermarkInvalidArgumentError(f"percentile must lie in [0, 100], got {percentile}")
    return float(np.percentile(np.abs(as_tensor(w, "watermark")), percentile))


_U32 = struct.Struct("<I")


def save_watermark(w: npt.ArrayLike, config: WatermarkConfig | dict[str, Any]) -> bytes:
    """WMKW layout: magic, u32 d, d f32 values, u32 length, UTF-8 JSON config."""
    values = as_tensor(w, "watermark").reshape(-1)
    provenance = config.to_dict() if isinstance(config, WatermarkConfig) else config
    blob = json.dumps(provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [
            WATERMARK_MAGIC,
            _U32.pack(values.shape[0]),
            np.ascontiguousarray(values, dtype="<f4").tobytes(),
            _U32.pack(len(blob)),
            blob,
        ]
    )


def load_watermark(buffer: bytes) -> tuple[Tensor, dict[str, Any]]:
    """Watermark values and the provenance dictionary stored with them."""
    if buffer[:4] != WATERMARK_MAGIC:
        raise OodWatermarkFormatError("bad watermark magic", 0)
    if len(buffer) < 8:
        raise OodWatermarkFormatError("truncated watermark header", len(buffer))
    (dim,) = _U32.unpack(buffer[4:8])
    values_end = 8 + 4 * dim
    if len(buffer) < values_end + 4:
        raise OodWatermarkFormatError(f"watermark of d={dim} is truncated", len(buffer))
    values = np.frombuffer(buffer, dtype="<f4", count=dim, offset=8).astype(np.float32)
    (blob_length,) = _U32.unpack(buffer[values_end : values_end + 4])
    blob_start = values_end + 4
    if len(buffer) != blob_start + blob_length:
        raise OodWatermarkFormatError(
            f"config blob declares {blob_length} bytes, {len(buffer) - blob_start} present", blob_start
        )
    try:
        provenance = json.loads(buffer[blob_start:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise OodWatermarkFormatError(f"config blob is not UTF-8 JSON: {err}", blob_start) from err
    if not isinstance(provenance, dict):
        raise OodWatermarkFormatError("config blob must hold a JSON object", blob_start)
    return values, provenance
