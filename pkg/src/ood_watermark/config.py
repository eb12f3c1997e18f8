"""Experiment configuration: a JSON document checked against voluptuous schemas."""

from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import voluptuous as vol
from voluptuous.humanize import humanize_error

from .const import (
    CONF_BASE,
    CONF_BATCH_SIZE,
    CONF_BETA,
    CONF_BOUND,
    CONF_CLAMP_QUANTILE,
    CONF_CLASS_COUNT,
    CONF_DATASET,
    CONF_EPOCHS,
    CONF_HIDDEN_DIMS,
    CONF_ID_DATASET,
    CONF_IMAGES,
    CONF_INPUT_DIM,
    CONF_KIND,
    CONF_KINDS,
    CONF_LABELS,
    CONF_LAMBDA,
    CONF_LOSS,
    CONF_LR,
    CONF_LR_DECAY_EPOCHS,
    CONF_MAGNITUDE,
    CONF_MODEL,
    CONF_MOMENTUM,
    CONF_NAME,
    CONF_NEGATIVE_SOURCE,
    CONF_OOD_DATASETS,
    CONF_OUTLIER_EXPOSURE,
    CONF_OUTLIERS,
    CONF_OUTPUT_DIR,
    CONF_RHO,
    CONF_ROLE,
    CONF_SCORER,
    CONF_SCORERS,
    CONF_SEEDS,
    CONF_SEPARATION,
    CONF_SIGMA1,
    CONF_SIGMA2,
    CONF_SIZE,
    CONF_SPACE,
    CONF_STEP_SIZE,
    CONF_SWEEP,
    CONF_T1,
    CONF_T2,
    CONF_TEMPERATURE,
    CONF_TEST_IMAGES,
    CONF_TEST_LABELS,
    CONF_TEST_SIZE,
    CONF_TRAIN,
    CONF_TRAIN_IMAGES,
    CONF_TRAIN_LABELS,
    CONF_TRAIN_SIZE,
    CONF_TRIALS,
    CONF_WATERMARK,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BLOB_CLASSES,
    DEFAULT_BLOB_DIM,
    DEFAULT_BLOB_SEPARATION,
    DEFAULT_ENERGY_TEMPERATURE,
    DEFAULT_HIDDEN_DIMS,
    DEFAULT_MOMENTUM,
    DEFAULT_ODIN_MAGNITUDE,
    DEFAULT_ODIN_TEMPERATURE,
    DEFAULT_OE_WEIGHT,
    DEFAULT_OOD_SIZE,
    DEFAULT_REACT_QUANTILE,
    DEFAULT_SIGMA2,
    DEFAULT_STEP_SIZE,
    DEFAULT_SWEEP_TRIALS,
    DEFAULT_TEST_SIZE,
    DEFAULT_TRAIN_EPOCHS,
    DEFAULT_TRAIN_LR,
    DEFAULT_TRAIN_SIZE,
    DEFAULT_WATERMARK_DECAY_EPOCHS,
    DEFAULT_WATERMARK_EPOCHS,
    KIND_GAUSSIAN_BLOBS,
    KIND_IDX,
    KIND_SHIFTED_ID,
    KIND_UNIFORM_BOX,
    ROLE_TEST,
    ROLE_VALIDATION,
    SEARCH_SPACE_FREE_ENERGY,
    SEARCH_SPACE_SOFTMAX,
    SOURCE_AUGMENTED,
    SOURCE_GAUSSIAN,
    SOURCE_OUTLIERS,
    SYNTHETIC_BOX_BOUND,
)
from .data import Shift
from .errors import OodWatermarkConfigError, OodWatermarkInvalidArgumentError
from .model import TrainConfig
from .scoring import (
    LOSS_FAMILY_FREE_ENERGY,
    LOSS_FAMILY_SOFTMAX,
    FreeEnergyScorer,
    MaxLogitScorer,
    OdinScorer,
    ReActScorer,
    Scorer,
    SoftmaxScorer,
)
from .watermark import (
    AugmentedId,
    FreeEnergyObjective,
    GaussianNoise,
    SoftmaxObjective,
    WatermarkConfig,
)

_LOGGER = logging.getLogger(__name__)

_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0))
_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_COUNT = vol.All(int, vol.Range(min=1))
_EPOCH_LIST = [vol.All(int, vol.Range(min=0))]
_SHIFT_KINDS = vol.All([vol.In([s.value for s in Shift])], vol.Length(min=1))


def _data_file(base_dir: Path) -> Callable[[Any], str]:
    """Resolve a path against the config file's directory, then require it to exist."""
    is_file = vol.IsFile()

    def validate(value: Any) -> str:
        resolved = str(base_dir / str(value))
        is_file(resolved)
        return resolved

    return validate


def _id_dataset_schema(data_file: Callable[[Any], str]) -> vol.Any:
    return vol.Any(
        vol.Schema(
            {
                vol.Required(CONF_KIND): KIND_IDX,
                vol.Required(CONF_TRAIN_IMAGES): data_file,
                vol.Required(CONF_TRAIN_LABELS): data_file,
                vol.Required(CONF_TEST_IMAGES): data_file,
                vol.Required(CONF_TEST_LABELS): data_file,
                vol.Optional(CONF_CLASS_COUNT): _COUNT,
            }
        ),
        vol.Schema(
            {
                vol.Required(CONF_KIND): KIND_GAUSSIAN_BLOBS,
                vol.Optional(CONF_CLASS_COUNT, default=DEFAULT_BLOB_CLASSES): _COUNT,
                vol.Optional(CONF_INPUT_DIM, default=DEFAULT_BLOB_DIM): _COUNT,
                vol.Optional(CONF_SEPARATION, default=DEFAULT_BLOB_SEPARATION): _NON_NEGATIVE,
                vol.Optional(CONF_TRAIN_SIZE, default=DEFAULT_TRAIN_SIZE): _COUNT,
                vol.Optional(CONF_TEST_SIZE, default=DEFAULT_TEST_SIZE): _COUNT,
            }
        ),
    )


def _ood_dataset_schema(data_file: Callable[[Any], str], with_role: bool = True) -> vol.Any:
    common: dict[Any, Any] = {vol.Required(CONF_NAME): vol.All(str, vol.Length(min=1))}
    if with_role:
        common[vol.Optional(CONF_ROLE, default=ROLE_TEST)] = vol.In([ROLE_TEST, ROLE_VALIDATION])
    return vol.Any(
        vol.Schema(
            {
                **common,
                vol.Required(CONF_KIND): KIND_IDX,
                vol.Required(CONF_IMAGES): data_file,
                vol.Optional(CONF_LABELS): data_file,
                vol.Optional(CONF_SIZE): _COUNT,
            }
        ),
        vol.Schema(
            {
                **common,
                vol.Required(CONF_KIND): KIND_UNIFORM_BOX,
                vol.Optional(CONF_SIZE, default=DEFAULT_OOD_SIZE): _COUNT,
                vol.Optional(CONF_BOUND, default=SYNTHETIC_BOX_BOUND): _POSITIVE,
            }
        ),
        vol.Schema(
            {
                **common,
                vol.Required(CONF_KIND): KIND_SHIFTED_ID,
                vol.Optional(CONF_KINDS, default=[s.value for s in Shift]): _SHIFT_KINDS,
                vol.Optional(CONF_SIZE): _COUNT,
            }
        ),
    )


SCORER_SCHEMA = vol.Any(
    vol.Schema({vol.Required(CONF_KIND): vol.In(["softmax", "maxlogit"])}),
    vol.Schema(
        {
            vol.Required(CONF_KIND): "free_energy",
            vol.Optional(CONF_TEMPERATURE, default=DEFAULT_ENERGY_TEMPERATURE): _POSITIVE,
        }
    ),
    vol.Schema(
        {
            vol.Required(CONF_KIND): "odin",
            vol.Optional(CONF_MAGNITUDE, default=DEFAULT_ODIN_MAGNITUDE): _NON_NEGATIVE,
            vol.Optional(CONF_TEMPERATURE, default=DEFAULT_ODIN_TEMPERATURE): _POSITIVE,
        }
    ),
    vol.Schema(
        {
            vol.Required(CONF_KIND): "react",
            vol.Optional(CONF_BASE, default=LOSS_FAMILY_FREE_ENERGY): vol.In(
                [LOSS_FAMILY_SOFTMAX, LOSS_FAMILY_FREE_ENERGY]
            ),
            vol.Optional(CONF_CLAMP_QUANTILE, default=DEFAULT_REACT_QUANTILE): vol.All(
                vol.Coerce(float), vol.Range(min=0, max=1, min_included=False)
            ),
            vol.Optional(CONF_TEMPERATURE, default=DEFAULT_ENERGY_TEMPERATURE): _POSITIVE,
        }
    ),
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_EPOCHS, default=DEFAULT_TRAIN_EPOCHS): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _COUNT,
        vol.Optional(CONF_LR, default=DEFAULT_TRAIN_LR): _POSITIVE,
        vol.Optional(CONF_MOMENTUM, default=DEFAULT_MOMENTUM): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Optional(CONF_LR_DECAY_EPOCHS, default=[]): _EPOCH_LIST,
    }
)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_HIDDEN_DIMS, default=list(DEFAULT_HIDDEN_DIMS)): [_COUNT],
        vol.Optional(CONF_TRAIN, default={}): TRAIN_SCHEMA,
    }
)


def _watermark_schema(data_file: Callable[[Any], str]) -> vol.Schema:
    return vol.Schema(
        {
            vol.Optional(CONF_LOSS, default=LOSS_FAMILY_FREE_ENERGY): vol.In(
                [LOSS_FAMILY_SOFTMAX, LOSS_FAMILY_FREE_ENERGY]
            ),
            vol.Optional(CONF_T1): _POSITIVE,
            vol.Optional(CONF_T2): _POSITIVE,
            vol.Optional(CONF_BETA): _NON_NEGATIVE,
            vol.Optional(CONF_SIGMA1): _NON_NEGATIVE,
            vol.Optional(CONF_SIGMA2, default=DEFAULT_SIGMA2): _NON_NEGATIVE,
            vol.Optional(CONF_RHO): _NON_NEGATIVE,
            vol.Optional(CONF_STEP_SIZE, default=DEFAULT_STEP_SIZE): _POSITIVE,
            vol.Optional(CONF_EPOCHS, default=DEFAULT_WATERMARK_EPOCHS): vol.All(int, vol.Range(min=0)),
            vol.Optional(CONF_LR_DECAY_EPOCHS, default=list(DEFAULT_WATERMARK_DECAY_EPOCHS)): _EPOCH_LIST,
            vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _COUNT,
            vol.Optional(CONF_NEGATIVE_SOURCE, default={CONF_KIND: SOURCE_GAUSSIAN}): vol.Any(
                vol.Schema({vol.Required(CONF_KIND): SOURCE_GAUSSIAN}),
                vol.Schema(
                    {
                        vol.Required(CONF_KIND): SOURCE_OUTLIERS,
                        vol.Required(CONF_DATASET): _ood_dataset_schema(data_file, with_role=False),
                    }
                ),
                vol.Schema(
                    {
                        vol.Required(CONF_KIND): SOURCE_AUGMENTED,
                        vol.Optional(CONF_KINDS, default=[s.value for s in Shift]): _SHIFT_KINDS,
                    }
                ),
            ),
            vol.Optional(CONF_SCORER): SCORER_SCHEMA,
        }
    )


SWEEP_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_TRIALS, default=DEFAULT_SWEEP_TRIALS): _COUNT,
        vol.Optional(CONF_SPACE): {
            vol.In([CONF_BETA, CONF_SIGMA1, CONF_RHO, CONF_T1, CONF_T2]): [_NON_NEGATIVE],
        },
        vol.Optional(CONF_SCORER): SCORER_SCHEMA,
    }
)


def experiment_schema(base_dir: Path) -> vol.Schema:
    data_file = _data_file(base_dir)
    return vol.Schema(
        {
            vol.Required(CONF_ID_DATASET): _id_dataset_schema(data_file),
            vol.Optional(CONF_OOD_DATASETS, default=[]): [_ood_dataset_schema(data_file)],
            vol.Optional(CONF_MODEL, default={}): MODEL_SCHEMA,
            vol.Optional(CONF_SCORERS, default=[{CONF_KIND: LOSS_FAMILY_FREE_ENERGY}]): vol.All(
                [SCORER_SCHEMA], vol.Length(min=1)
            ),
            vol.Optional(CONF_WATERMARK, default={}): _watermark_schema(data_file),
            vol.Optional(CONF_SWEEP, default={}): SWEEP_SCHEMA,
            vol.Optional(CONF_OUTLIER_EXPOSURE): vol.Schema(
                {
                    vol.Required(CONF_OUTLIERS): _ood_dataset_schema(data_file, with_role=False),
                    vol.Optional(CONF_LAMBDA, default=DEFAULT_OE_WEIGHT): _NON_NEGATIVE,
                }
            ),
            vol.Optional(CONF_OUTPUT_DIR): str,
            vol.Optional(CONF_SEEDS, default=[0]): vol.All([vol.All(int, vol.Range(min=0))], vol.Length(min=1)),
        }
    )


@dataclass(frozen=True)
class BlobsDatasetSpec:
    class_count: int
    input_dim: int
    separation: float
    train_size: int
    test_size: int


@dataclass(frozen=True)
class IdxDatasetSpec:
    train_images: Path
    train_labels: Path
    test_images: Path
    test_labels: Path
    class_count: int | None = None


IdDatasetSpec = BlobsDatasetSpec | IdxDatasetSpec


@dataclass(frozen=True)
class OodDatasetSpec:
    """An OOD set: IDX images, a uniform box, or shifted copies of the ID test split."""

    name: str
    kind: str
    role: str = ROLE_TEST
    size: int | None = None
    images: Path | None = None
    labels: Path | None = None
    bound: float = SYNTHETIC_BOX_BOUND
    shifts: tuple[Shift, ...] = ()


@dataclass(frozen=True)
class OutlierExposureSpec:
    outliers: OodDatasetSpec
    weight: float


@dataclass(frozen=True)
class SweepSpec:
    trials: int
    space: dict[str, list[float]]
    scorer: Scorer


@dataclass(frozen=True)
class ExperimentConfig:
    id_dataset: IdDatasetSpec
    ood_datasets: list[OodDatasetSpec]
    hidden_dims: tuple[int, ...]
    train: TrainConfig
    scorers: list[Scorer]
    watermark: WatermarkConfig
    watermark_scorer: Scorer
    sweep: SweepSpec
    output_dir: Path | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    watermark_outliers: OodDatasetSpec | None = None
    outlier_exposure: OutlierExposureSpec | None = None

    def with_overrides(self, seed: int | None = None, output_dir: Path | None = None) -> ExperimentConfig:
        """Apply command-line --seed and --out over the file's values."""
        return dataclasses.replace(
            self,
            seeds=[seed] if seed is not None else self.seeds,
            output_dir=output_dir if output_dir is not None else self.output_dir,
        )

    def ood_sets(self, role: str) -> list[OodDatasetSpec]:
        return [spec for spec in self.ood_datasets if spec.role == role]


def build_scorer(conf: Mapping[str, Any]) -> Scorer:
    kind = conf[CONF_KIND]
    if kind == "softmax":
        return SoftmaxScorer()
    if kind == "maxlogit":
        return MaxLogitScorer()
    if kind == "free_energy":
        return FreeEnergyScorer(conf[CONF_TEMPERATURE])
    if kind == "odin":
        return OdinScorer(conf[CONF_MAGNITUDE], conf[CONF_TEMPERATURE])
    base: SoftmaxScorer | FreeEnergyScorer = (
        SoftmaxScorer() if conf[CONF_BASE] == LOSS_FAMILY_SOFTMAX else FreeEnergyScorer(conf[CONF_TEMPERATURE])
    )
    return ReActScorer(base, conf[CONF_CLAMP_QUANTILE])


def _ood_spec(conf: Mapping[str, Any]) -> OodDatasetSpec:
    return OodDatasetSpec(
        name=conf[CONF_NAME],
        kind=conf[CONF_KIND],
        role=conf.get(CONF_ROLE, ROLE_TEST),
        size=conf.get(CONF_SIZE),
        images=Path(conf[CONF_IMAGES]) if CONF_IMAGES in conf else None,
        labels=Path(conf[CONF_LABELS]) if CONF_LABELS in conf else None,
        bound=conf.get(CONF_BOUND, SYNTHETIC_BOX_BOUND),
        shifts=tuple(Shift(k) for k in conf.get(CONF_KINDS, ())),
    )


def _id_spec(conf: Mapping[str, Any]) -> IdDatasetSpec:
    if conf[CONF_KIND] == KIND_GAUSSIAN_BLOBS:
        return BlobsDatasetSpec(
            conf[CONF_CLASS_COUNT],
            conf[CONF_INPUT_DIM],
            conf[CONF_SEPARATION],
            conf[CONF_TRAIN_SIZE],
            conf[CONF_TEST_SIZE],
        )
    return IdxDatasetSpec(
        Path(conf[CONF_TRAIN_IMAGES]),
        Path(conf[CONF_TRAIN_LABELS]),
        Path(conf[CONF_TEST_IMAGES]),
        Path(conf[CONF_TEST_LABELS]),
        conf.get(CONF_CLASS_COUNT),
    )


def build_watermark_config(conf: Mapping[str, Any]) -> WatermarkConfig:
    """Loss-family defaults first, then whatever the block sets explicitly."""
    objective: SoftmaxObjective | FreeEnergyObjective
    if conf[CONF_LOSS] == LOSS_FAMILY_SOFTMAX:
        if CONF_T1 in conf or CONF_T2 in conf:
            raise OodWatermarkConfigError("t1/t2 only apply to the free_energy watermark loss")
        objective = SoftmaxObjective()
    else:
        objective = FreeEnergyObjective(
            **{key: conf[key] for key in (CONF_T1, CONF_T2) if key in conf}
        )
    source_conf = conf[CONF_NEGATIVE_SOURCE]
    source = (
        AugmentedId(tuple(Shift(k) for k in source_conf[CONF_KINDS]))
        if source_conf[CONF_KIND] == SOURCE_AUGMENTED
        else GaussianNoise()
    )
    explicit = {key: conf[key] for key in (CONF_BETA, CONF_SIGMA1, CONF_RHO) if key in conf}
    return WatermarkConfig.defaults_for(
        objective,
        sigma2=conf[CONF_SIGMA2],
        step_size=conf[CONF_STEP_SIZE],
        epochs=conf[CONF_EPOCHS],
        lr_decay_epochs=tuple(conf[CONF_LR_DECAY_EPOCHS]),
        batch_size=conf[CONF_BATCH_SIZE],
        negative_source=source,
        **explicit,
    )


def default_search_space(objective: SoftmaxObjective | FreeEnergyObjective) -> dict[str, list[float]]:
    table = SEARCH_SPACE_SOFTMAX if isinstance(objective, SoftmaxObjective) else SEARCH_SPACE_FREE_ENERGY
    return {name: list(values) for name, values in table.items()}


def build_config(conf: Mapping[str, Any]) -> ExperimentConfig:
    """Turn a schema-validated mapping into typed specs."""
    model_conf = conf[CONF_MODEL]
    train_conf = model_conf[CONF_TRAIN]
    watermark_conf = conf[CONF_WATERMARK]
    watermark = build_watermark_config(watermark_conf)
    loss_family = watermark_conf[CONF_LOSS]
    watermark_scorer = build_scorer(watermark_conf.get(CONF_SCORER, {CONF_KIND: loss_family, CONF_TEMPERATURE: 1.0}))
    source_conf = watermark_conf[CONF_NEGATIVE_SOURCE]

    sweep_conf = conf[CONF_SWEEP]
    space = sweep_conf.get(CONF_SPACE)
    if space is None:
        space = default_search_space(watermark.objective)
    elif any(not values for values in space.values()) or not space:
        raise OodWatermarkConfigError("sweep search space must list at least one value per hyperparameter")
    if isinstance(watermark.objective, SoftmaxObjective) and ({CONF_T1, CONF_T2} & set(space)):
        raise OodWatermarkConfigError("t1/t2 cannot be searched for the softmax watermark loss")
    sweep_scorer = build_scorer(sweep_conf[CONF_SCORER]) if CONF_SCORER in sweep_conf else watermark_scorer

    oe_conf = conf.get(CONF_OUTLIER_EXPOSURE)
    try:
        train = TrainConfig(
            epochs=train_conf[CONF_EPOCHS],
            batch_size=train_conf[CONF_BATCH_SIZE],
            lr=train_conf[CONF_LR],
            momentum=train_conf[CONF_MOMENTUM],
            lr_decay_epochs=tuple(train_conf[CONF_LR_DECAY_EPOCHS]),
        )
    except OodWatermarkInvalidArgumentError as err:
        raise OodWatermarkConfigError(f"model.train: {err}") from err

    names = [spec[CONF_NAME] for spec in conf[CONF_OOD_DATASETS]]
    if len(set(names)) != len(names):
        raise OodWatermarkConfigError("OOD dataset names must be unique")

    return ExperimentConfig(
        id_dataset=_id_spec(conf[CONF_ID_DATASET]),
        ood_datasets=[_ood_spec(spec) for spec in conf[CONF_OOD_DATASETS]],
        hidden_dims=tuple(model_conf[CONF_HIDDEN_DIMS]),
        train=train,
        scorers=[build_scorer(spec) for spec in conf[CONF_SCORERS]],
        watermark=watermark,
        watermark_scorer=watermark_scorer,
        sweep=SweepSpec(sweep_conf[CONF_TRIALS], {k: list(v) for k, v in space.items()}, sweep_scorer),
        output_dir=Path(conf[CONF_OUTPUT_DIR]) if CONF_OUTPUT_DIR in conf else None,
        seeds=list(conf[CONF_SEEDS]),
        watermark_outliers=_ood_spec(source_conf[CONF_DATASET]) if source_conf[CONF_KIND] == SOURCE_OUTLIERS else None,
        outlier_exposure=(
            OutlierExposureSpec(_ood_spec(oe_conf[CONF_OUTLIERS]), oe_conf[CONF_LAMBDA]) if oe_conf else None
        ),
    )


def parse_config(data: Any, base_dir: Path) -> ExperimentConfig:
    """Validate a decoded JSON document; every failure becomes OodWatermarkConfigError."""
    schema = experiment_schema(base_dir)
    try:
        validated = schema(data)
    except vol.Invalid as err:
        raise OodWatermarkConfigError(f"invalid configuration: {humanize_error(data, err)}") from err
    try:
        return build_config(validated)
    except OodWatermarkInvalidArgumentError as err:
        raise OodWatermarkConfigError(f"invalid configuration: {err}") from err


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise OodWatermarkConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise OodWatermarkConfigError(f"{path} is not valid JSON: {err}") from err
    config = parse_config(data, path.resolve().parent)
    _LOGGER.debug("loaded configuration from %s", path)
    return config
