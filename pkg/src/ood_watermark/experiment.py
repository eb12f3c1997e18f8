"""Per-seed experiment pipeline: train, learn a watermark, evaluate, sweep."""

from __future__ import annotations

import csv
import dataclasses
import logging
import re
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import TypeVar

import numpy as np
import numpy.typing as npt

from .config import BlobsDatasetSpec, ExperimentConfig, IdDatasetSpec, OodDatasetSpec
from .const import (
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_OOD_SIZE,
    FILE_CHECKPOINT,
    FILE_STATS,
    FILE_SWEEP,
    FILE_TRAIN_REPORT,
    FILE_WATERMARK,
    FILE_WATERMARK_REPORT,
    FILE_WATERMARK_TRACE,
    KIND_IDX,
    KIND_SHIFTED_ID,
    KIND_UNIFORM_BOX,
    ROLE_TEST,
    ROLE_VALIDATION,
    SCORES_DIR,
    SEED_DIR_PREFIX,
    SWEEP_HOLDOUT_FRACTION,
)
from .data import (
    GaussianBlobs,
    LabeledDataset,
    NormalizationStats,
    UniformBox,
    load_idx,
    load_idx_images,
    make_synthetic,
    shift_normalized,
)
from .errors import OodWatermarkConfigError, OodWatermarkInvalidArgumentError
from .metrics import (
    DetectionMetrics,
    MetricsRow,
    ScoreSet,
    evaluate_detection,
    score_histogram,
    write_histogram_csv,
    write_metrics_csv,
    write_scores_csv,
)
from .model import MlpModel, accuracy, fine_tune_oe, load_checkpoint, save_checkpoint, train_classifier
from .scoring import OdinScorer, ReActScorer, Scorer
from .tensor import SeededRng, Tensor, stage_seed
from .watermark import (
    MaskMode,
    OutlierSet,
    Watermark,
    WatermarkConfig,
    apply_watermark,
    load_watermark,
    mask_threshold_at_percentile,
    mask_watermark,
    save_watermark,
    train_watermark,
)

_LOGGER = logging.getLogger(__name__)

_T = TypeVar("_T")

TAG_CLEAN = "clean"
TAG_WATERMARKED = "watermarked"
METRICS_PREFIX = "metrics-"
SWEEP_COLUMNS = ["beta", "sigma1", "rho", "t1", "t2"]
_MASK_PATTERN = re.compile(r"^(keep_large|keep_small)=(p?)([0-9]*\.?[0-9]+)$")


@dataclass(frozen=True)
class IdData:
    train: LabeledDataset
    test: LabeledDataset
    stats: NormalizationStats

    def holdout_split(
        self, seed: int, fraction: float = SWEEP_HOLDOUT_FRACTION
    ) -> tuple[LabeledDataset, LabeledDataset]:
        """Disjoint (fit, held-out) parts of the training split; the test split is untouched."""
        if self.train.size < 2:
            raise OodWatermarkInvalidArgumentError("a holdout split needs at least two training rows")
        held = min(max(int(round(fraction * self.train.size)), 1), self.train.size - 1)
        order = SeededRng.derive(seed, "holdout").permutation(self.train.size)
        return self.train.subset(np.sort(order[held:])), self.train.subset(np.sort(order[:held]))


@dataclass(frozen=True)
class MaskSpec:
    """A mask request such as keep_large=0.05 or keep_small=p50 (percentile of |w|)."""

    mode: MaskMode
    value: float
    percentile: bool = False

    @classmethod
    def parse(cls, text: str) -> MaskSpec:
        match = _MASK_PATTERN.match(text.strip())
        if match is None:
            raise OodWatermarkConfigError(f"mask must look like keep_large=0.1 or keep_small=p50, got {text!r}")
        mode, percent, value = match.groups()
        spec = cls(MaskMode(mode), float(value), percent == "p")
        if spec.percentile and spec.value > 100:
            raise OodWatermarkConfigError(f"mask percentile must lie in [0, 100], got {spec.value}")
        return spec

    def threshold(self, w: Tensor) -> float:
        return mask_threshold_at_percentile(w, self.value) if self.percentile else self.value

    def apply(self, w: Tensor) -> Tensor:
        return mask_watermark(w, self.mode, self.threshold(w))

    @property
    def tag(self) -> str:
        return f"masked-{self.mode.value}-{'p' if self.percentile else ''}{self.value:g}"


@dataclass(frozen=True)
class SweepResult:
    index: int
    config: WatermarkConfig
    fpr95: float
    auroc: float

    def sort_key(self) -> tuple[float, float, int]:
        return (self.fpr95, -self.auroc, self.index)


def load_id_data(spec: IdDatasetSpec, seed: int, stats: NormalizationStats | None = None) -> IdData:
    """ID train/test splits; IDX test data is standardized with the training statistics."""
    if isinstance(spec, BlobsDatasetSpec):
        rng = SeededRng.derive(seed, "data")
        blobs = GaussianBlobs(spec.class_count, spec.input_dim, spec.separation)
        train = make_synthetic(blobs, spec.train_size, rng)
        test = make_synthetic(blobs, spec.test_size, rng)
        assert isinstance(train, LabeledDataset) and isinstance(test, LabeledDataset)
        identity = NormalizationStats.identity(spec.input_dim)
        return IdData(dataclasses.replace(train, stats=identity), dataclasses.replace(test, stats=identity), identity)
    train = load_idx(spec.train_images, spec.train_labels, stats, spec.class_count)
    assert train.stats is not None
    test = load_idx(spec.test_images, spec.test_labels, train.stats, train.class_count)
    return IdData(train, test, train.stats)


def load_ood_set(spec: OodDatasetSpec, id_data: IdData, seed: int, base: LabeledDataset | None = None) -> Tensor:
    """Inputs of one OOD set, in the same normalized space as the ID data.

    shifted_id sets are built from `base`, the ID test split unless another is given.
    """
    base = id_data.test if base is None else base
    rng = SeededRng.derive(seed, f"ood:{spec.name}")
    dim = id_data.test.input_dim
    if spec.kind == KIND_UNIFORM_BOX:
        inputs = make_synthetic(UniformBox(dim, spec.bound), spec.size or DEFAULT_OOD_SIZE, rng)
        assert not isinstance(inputs, LabeledDataset)
        return inputs
    if spec.kind == KIND_IDX:
        assert spec.images is not None
        inputs, _, _ = load_idx_images(spec.images, id_data.stats)
        if inputs.shape[1] != dim:
            raise OodWatermarkInvalidArgumentError(f"OOD set {spec.name} has d={inputs.shape[1]}, ID data d={dim}")
        return inputs[: spec.size] if spec.size else inputs
    if spec.kind == KIND_SHIFTED_ID:
        if base.spatial_shape is None:
            raise OodWatermarkInvalidArgumentError(f"OOD set {spec.name}: shifted_id needs image-shaped ID data")
        rows = base.inputs[: spec.size] if spec.size else base.inputs
        return shift_normalized(rows, base.spatial_shape, spec.shifts, rng, id_data.stats)
    raise OodWatermarkConfigError(f"unknown OOD dataset kind {spec.kind}")


def check_compatibility(scorer: Scorer, cfg: WatermarkConfig) -> None:
    if scorer.loss_family != cfg.objective.kind:
        raise OodWatermarkConfigError(
            f"a {cfg.objective.kind} watermark loss cannot target the {scorer.name} scorer "
            f"(needs the {scorer.loss_family} loss)"
        )


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


class SeedRun:
    """All stages of one seeded run, sharing lazily loaded data and artifacts."""

    def __init__(self, config: ExperimentConfig, seed: int) -> None:
        if config.output_dir is None:
            raise OodWatermarkConfigError("no output directory: set output_dir or pass --out")
        self.config = config
        self.seed = seed
        self.directory = config.output_dir / f"{SEED_DIR_PREFIX}{seed}"

    def path(self, name: str) -> Path:
        return self.directory / name

    @cached_property
    def id_data(self) -> IdData:
        stats_path = self.path(FILE_STATS)
        stats = None
        if not isinstance(self.config.id_dataset, BlobsDatasetSpec) and stats_path.exists():
            stats = NormalizationStats.from_bytes(stats_path.read_bytes())
        return load_id_data(self.config.id_dataset, self.seed, stats)

    @cached_property
    def model(self) -> MlpModel:
        path = self.path(FILE_CHECKPOINT)
        if not path.exists():
            raise OodWatermarkConfigError(f"{path} not found; run train-classifier first")
        return load_checkpoint(path.read_bytes())

    def load_watermark(self) -> Tensor:
        path = self.path(FILE_WATERMARK)
        if not path.exists():
            raise OodWatermarkConfigError(f"{path} not found; run learn-watermark first")
        w, _ = load_watermark(path.read_bytes())
        if w.shape[0] != self.model.input_dim:
            raise OodWatermarkInvalidArgumentError(
                f"watermark has d={w.shape[0]} but the model expects {self.model.input_dim}"
            )
        return w

    def ood_inputs(self, spec: OodDatasetSpec, base: LabeledDataset | None = None) -> Tensor:
        return load_ood_set(spec, self.id_data, self.seed, base)

    def train_classifier(self) -> MlpModel:
        self.directory.mkdir(parents=True, exist_ok=True)
        data = self.id_data
        dims = [data.train.input_dim, *self.config.hidden_dims, data.train.class_count]
        initial = MlpModel.initialize(dims, stage_seed(self.seed, "model"))
        train_cfg = dataclasses.replace(self.config.train, seed=stage_seed(self.seed, "train"))
        result = train_classifier(initial, data.train, train_cfg)
        oe = self.config.outlier_exposure
        if oe is not None:
            outliers = self.ood_inputs(oe.outliers)
            result = fine_tune_oe(result.model, data.train, outliers, train_cfg, oe.weight)
        model = result.model
        self.path(FILE_CHECKPOINT).write_bytes(save_checkpoint(model))
        self.path(FILE_STATS).write_bytes(data.stats.to_bytes())
        train_accuracy = accuracy(model, data.train)
        test_accuracy = accuracy(model, data.test)
        _write_rows(
            self.path(FILE_TRAIN_REPORT),
            ["split", "accuracy"],
            [["train", f"{train_accuracy:.6f}"], ["test", f"{test_accuracy:.6f}"]],
        )
        _LOGGER.info("seed %d: train accuracy %.4f, test accuracy %.4f", self.seed, train_accuracy, test_accuracy)
        self.__dict__["model"] = model
        return model

    def watermark_config(self, scorer: Scorer, base: WatermarkConfig | None = None) -> WatermarkConfig:
        """The configured watermark settings made concrete for this seed and target scorer."""
        cfg = base or self.config.watermark
        check_compatibility(scorer, cfg)
        updates: dict[str, object] = {"seed": stage_seed(self.seed, "watermark")}
        if isinstance(scorer, ReActScorer):
            updates["react_threshold"] = scorer.threshold
        if isinstance(scorer, OdinScorer):
            updates["odin_magnitude"] = scorer.magnitude
        if self.config.watermark_outliers is not None:
            updates["negative_source"] = OutlierSet(self.ood_inputs(self.config.watermark_outliers))
        return dataclasses.replace(cfg, **updates)

    def learn_watermark(self) -> Watermark:
        check_compatibility(self.config.watermark_scorer, self.config.watermark)
        model = self.model
        scorer = self.config.watermark_scorer.fitted(model, self.id_data.train)
        watermark = train_watermark(model, self.id_data.train, self.watermark_config(scorer))
        self.path(FILE_WATERMARK).write_bytes(save_watermark(watermark.w, watermark.config))
        _write_rows(
            self.path(FILE_WATERMARK_TRACE),
            ["epoch", "risk", "loss_id", "loss_ood", "step_size"],
            [
                [t.epoch, f"{t.risk:.9g}", f"{t.loss_id:.9g}", f"{t.loss_ood:.9g}", f"{t.step_size:.9g}"]
                for t in watermark.trace
            ],
        )
        test = self.id_data.test
        clean = accuracy(model, test)
        marked = accuracy(model, dataclasses.replace(test, inputs=apply_watermark(watermark.w, test.inputs)))
        _write_rows(
            self.path(FILE_WATERMARK_REPORT),
            ["split", "clean_accuracy", "watermarked_accuracy"],
            [["test", f"{clean:.6f}", f"{marked:.6f}"]],
        )
        _LOGGER.info("seed %d: test accuracy %.4f clean, %.4f watermarked", self.seed, clean, marked)
        return watermark

    def score_sets(
        self,
        scorer: Scorer,
        w: Tensor | None,
        ood_specs: Sequence[OodDatasetSpec],
        id_split: LabeledDataset | None = None,
    ) -> dict[str, ScoreSet]:
        """ID scores (test split by default) against each OOD set, with w added to every input when given."""
        id_set = self.id_data.test if id_split is None else id_split

        def scores(inputs: Tensor) -> npt.NDArray[np.float64]:
            return np.atleast_1d(scorer.score(self.model, inputs if w is None else apply_watermark(w, inputs)))

        id_scores = scores(id_set.inputs)
        return {spec.name: ScoreSet.of(id_scores, scores(self.ood_inputs(spec, id_set))) for spec in ood_specs}

    def evaluate(
        self,
        with_watermark: bool = False,
        mask: MaskSpec | None = None,
        id_positive: bool = True,
        bins: int = DEFAULT_HISTOGRAM_BINS,
    ) -> list[MetricsRow]:
        test_sets = self.config.ood_sets(ROLE_TEST)
        if not test_sets:
            raise OodWatermarkConfigError("evaluate needs at least one OOD dataset with role 'test'")
        if mask is not None and not with_watermark:
            raise OodWatermarkConfigError("a mask only applies together with --watermark")
        w: Tensor | None = None
        tag = TAG_CLEAN
        if with_watermark:
            w = self.load_watermark()
            tag = TAG_WATERMARKED
            if mask is not None:
                w = mask.apply(w)
                tag = mask.tag
        scores_dir = self.directory / SCORES_DIR / tag
        scores_dir.mkdir(parents=True, exist_ok=True)
        rows: list[MetricsRow] = []
        for configured in self.config.scorers:
            scorer = configured.fitted(self.model, self.id_data.train)
            for ood_name, scores in self.score_sets(scorer, w, test_sets).items():
                metrics = evaluate_detection(scores, id_positive=id_positive)
                rows.append(MetricsRow(scorer.name, with_watermark, ood_name, metrics))
                stem = f"{scorer.name}__{ood_name}"
                write_scores_csv(scores_dir / f"{stem}.scores.csv", scores)
                write_histogram_csv(scores_dir / f"{stem}.hist.csv", score_histogram(scores, bins))
                _LOGGER.info(
                    "seed %d [%s] %s vs %s: FPR95 %.4f AUROC %.4f AUPR %.4f",
                    self.seed,
                    tag,
                    scorer.name,
                    ood_name,
                    metrics.fpr95,
                    metrics.auroc,
                    metrics.aupr,
                )
        write_metrics_csv(self.path(f"{METRICS_PREFIX}{tag}.csv"), rows)
        return rows

    def validation_metrics(self, scorer: Scorer, w: Tensor, held_out: LabeledDataset) -> DetectionMetrics:
        """Mean FPR95/AUROC/AUPR of held-out ID rows against the validation OOD sets."""
        score_sets = self.score_sets(scorer, w, self.config.ood_sets(ROLE_VALIDATION), held_out)
        results = [evaluate_detection(scores) for scores in score_sets.values()]
        return DetectionMetrics(
            float(np.mean([r.fpr95 for r in results])),
            float(np.mean([r.auroc for r in results])),
            float(np.mean([r.aupr for r in results])),
        )

    def sweep(self) -> list[SweepResult]:
        """Coordinate-wise random search ranked by validation FPR95, then AUROC."""
        spec = self.config.sweep
        if not spec.space or any(not values for values in spec.space.values()):
            raise OodWatermarkConfigError("sweep search space is empty")
        if not self.config.ood_sets(ROLE_VALIDATION):
            raise OodWatermarkConfigError("sweep needs at least one OOD dataset with role 'validation'")
        scorer = spec.scorer.fitted(self.model, self.id_data.train)
        fit_split, held_out = self.id_data.holdout_split(self.seed)
        current = self.watermark_config(scorer, start_point(self.config.watermark, spec.space))
        evaluated: dict[tuple[float, ...], SweepResult] = {}

        def evaluate(cfg: WatermarkConfig) -> SweepResult:
            key = tuple(cfg.hyperparameter(name) for name in sorted(spec.space))
            if key not in evaluated:
                w = train_watermark(self.model, fit_split, cfg).w
                metrics = self.validation_metrics(scorer, w, held_out)
                evaluated[key] = SweepResult(len(evaluated), cfg, metrics.fpr95, metrics.auroc)
                _LOGGER.debug(
                    "seed %d sweep point %s: FPR95 %.4f AUROC %.4f", self.seed, key, metrics.fpr95, metrics.auroc
                )
            return evaluated[key]

        best = evaluate(current)
        rng = SeededRng.derive(self.seed, "sweep")
        names = sorted(spec.space)
        for trial in range(spec.trials):
            name = names[int(rng.integers(len(names), 1)[0])]
            incumbent = best
            for value in spec.space[name]:
                candidate = evaluate(incumbent.config.with_hyperparameter(name, value))
                if candidate.sort_key() < best.sort_key():
                    best = candidate
            _LOGGER.info(
                "seed %d sweep trial %d/%d on %s: best FPR95 %.4f", self.seed, trial + 1, spec.trials, name, best.fpr95
            )

        ranked = sorted(evaluated.values(), key=SweepResult.sort_key)
        _write_rows(
            self.path(FILE_SWEEP),
            ["rank", *SWEEP_COLUMNS, "fpr95", "auroc"],
            [
                [rank, *(_hyperparameter_cell(r.config, n) for n in SWEEP_COLUMNS), f"{r.fpr95:.6f}", f"{r.auroc:.6f}"]
                for rank, r in enumerate(ranked, start=1)
            ],
        )
        return ranked


def _hyperparameter_cell(cfg: WatermarkConfig, name: str) -> str:
    try:
        return f"{cfg.hyperparameter(name):g}"
    except OodWatermarkInvalidArgumentError:
        return ""


def start_point(cfg: WatermarkConfig, space: dict[str, list[float]]) -> WatermarkConfig:
    """Snap each searched hyperparameter to its nearest candidate value."""
    for name in sorted(space):
        current = cfg.hyperparameter(name)
        nearest = min(space[name], key=lambda value: abs(value - current))
        cfg = cfg.with_hyperparameter(name, nearest)
    return cfg


def run_seeds(seeds: Sequence[int], job: Callable[[int], _T], threads: int) -> list[_T]:
    """Run `job` for every seed, at most `threads` at a time; results keep seed order."""
    if threads <= 1 or len(seeds) <= 1:
        return [job(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=min(threads, len(seeds)), thread_name_prefix="seed") as pool:
        return list(pool.map(job, seeds))
