"""Threshold-free detection metrics and score exports.

ID is the positive class throughout unless `id_positive=False` is passed to aupr.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.stats import rankdata

from .const import DEFAULT_TPR_TARGET
from .errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError

SCORES_HEADER = ["score", "is_id"]
METRICS_HEADER = ["scorer", "watermarked", "ood_set", "fpr95", "auroc", "aupr"]
HISTOGRAM_HEADER = ["bin_low", "bin_high", "id_count", "ood_count"]


@dataclass(frozen=True)
class ScoreSample:
    score: float
    is_id: bool

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise OodWatermarkInvalidArgumentError(f"score must be finite, got {self.score}")


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Scores of ID and OOD inputs kept as two float64 arrays."""

    id_scores: npt.NDArray[np.float64]
    ood_scores: npt.NDArray[np.float64]

    @classmethod
    def of(cls, id_scores: npt.ArrayLike, ood_scores: npt.ArrayLike) -> ScoreSet:
        ids = np.asarray(id_scores, dtype=np.float64).reshape(-1)
        oods = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(ids)) and np.all(np.isfinite(oods))):
            raise OodWatermarkInvalidArgumentError("scores must be finite")
        return cls(ids, oods)

    @classmethod
    def from_samples(cls, samples: Iterable[ScoreSample]) -> ScoreSet:
        items = list(samples)
        return cls.of([s.score for s in items if s.is_id], [s.score for s in items if not s.is_id])

    def samples(self) -> list[ScoreSample]:
        return [ScoreSample(float(s), True) for s in self.id_scores] + [
            ScoreSample(float(s), False) for s in self.ood_scores
        ]

    def flipped(self) -> ScoreSet:
        """OOD as the positive class: roles swapped and scores negated."""
        return ScoreSet(-self.ood_scores, -self.id_scores)


Samples = ScoreSet | Iterable[ScoreSample]


@dataclass(frozen=True)
class DetectionMetrics:
    fpr95: float
    auroc: float
    aupr: float


def _score_set(samples: Samples) -> ScoreSet:
    scores = samples if isinstance(samples, ScoreSet) else ScoreSet.from_samples(samples)
    if scores.id_scores.size == 0 or scores.ood_scores.size == 0:
        raise OodWatermarkInvalidArgumentError("metrics need at least one ID and one OOD score")
    return scores


def auroc(samples: Samples) -> float:
    """Mann-Whitney probability that an ID score beats an OOD score, ties counting one half."""
    scores = _score_set(samples)
    n_id, n_ood = scores.id_scores.size, scores.ood_scores.size
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]), method="average")
    u_statistic = float(np.sum(ranks[:n_id])) - n_id * (n_id + 1) / 2.0
    return u_statistic / (n_id * n_ood)


def fpr_at_tpr(samples: Samples, tpr_target: float = DEFAULT_TPR_TARGET) -> float:
    """OOD acceptance rate at the largest ID-score threshold keeping ID recall >= tpr_target."""
    if not 0.0 < tpr_target <= 1.0:
        raise OodWatermarkInvalidArgumentError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    scores = _score_set(samples)
    ids = np.sort(scores.id_scores)
    candidates = np.unique(ids)
    accepted = ids.size - np.searchsorted(ids, candidates, side="left")
    threshold = candidates[accepted / ids.size >= tpr_target].max()
    return float(np.count_nonzero(scores.ood_scores >= threshold)) / scores.ood_scores.size


def aupr(samples: Samples, id_positive: bool = True) -> float:
    """Step-wise area under precision/recall, thresholds at distinct scores, ties as one group."""
    scores = _score_set(samples)
    if not id_positive:
        scores = scores.flipped()
    positives = np.sort(scores.id_scores)
    negatives = np.sort(scores.ood_scores)
    thresholds = np.unique(np.concatenate([positives, negatives]))[::-1]
    tp = positives.size - np.searchsorted(positives, thresholds, side="left")
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    recall = tp / positives.size
    precision = tp / (tp + fp)
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(precision * gains))


def evaluate_detection(
    samples: Samples, tpr_target: float = DEFAULT_TPR_TARGET, id_positive: bool = True
) -> DetectionMetrics:
    scores = _score_set(samples)
    return DetectionMetrics(fpr_at_tpr(scores, tpr_target), auroc(scores), aupr(scores, id_positive))


@dataclass(frozen=True)
class ScoreHistogram:
    edges: npt.NDArray[np.float64]
    id_counts: npt.NDArray[np.int64]
    ood_counts: npt.NDArray[np.int64]


def score_histogram(samples: Samples, bins: int) -> ScoreHistogram:
    """Per-class counts over shared equal-width bins on [min, max]; the top bin is closed."""
    if bins < 1:
        raise OodWatermarkInvalidArgumentError(f"bins must be >= 1, got {bins}")
    scores = samples if isinstance(samples, ScoreSet) else ScoreSet.from_samples(samples)
    pooled = np.concatenate([scores.id_scores, scores.ood_scores])
    if pooled.size == 0:
        empty = np.zeros(bins, dtype=np.int64)
        return ScoreHistogram(np.zeros(bins + 1), empty, empty.copy())
    low, high = float(pooled.min()), float(pooled.max())

    def counts(values: npt.NDArray[np.float64]) -> npt.NDArray[np.int64]:
        if high == low:
            index = np.full(values.size, bins - 1, dtype=np.int64)
        else:
            index = np.minimum(np.floor((values - low) / (high - low) * bins).astype(np.int64), bins - 1)
        return np.bincount(index, minlength=bins).astype(np.int64)

    return ScoreHistogram(np.linspace(low, high, bins + 1), counts(scores.id_scores), counts(scores.ood_scores))


@dataclass(frozen=True)
class MetricsRow:
    scorer: str
    watermarked: bool
    ood_set: str
    metrics: DetectionMetrics


def write_scores_csv(path: Path, scores: ScoreSet) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SCORES_HEADER)
        for sample in scores.samples():
            writer.writerow([repr(sample.score), int(sample.is_id)])


def read_scores_csv(path: Path) -> ScoreSet:
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != SCORES_HEADER:
            raise OodWatermarkFormatError(f"{path.name}: expected header {','.join(SCORES_HEADER)}", 0)
        return ScoreSet.from_samples(ScoreSample(float(row["score"]), row["is_id"] == "1") for row in reader)


def write_metrics_csv(path: Path, rows: Sequence[MetricsRow]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.scorer,
                    int(row.watermarked),
                    row.ood_set,
                    f"{row.metrics.fpr95:.6f}",
                    f"{row.metrics.auroc:.6f}",
                    f"{row.metrics.aupr:.6f}",
                ]
            )


def read_metrics_csv(path: Path) -> list[MetricsRow]:
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != METRICS_HEADER:
            raise OodWatermarkFormatError(f"{path.name}: expected header {','.join(METRICS_HEADER)}", 0)
        try:
            return [
                MetricsRow(
                    row["scorer"],
                    row["watermarked"] == "1",
                    row["ood_set"],
                    DetectionMetrics(float(row["fpr95"]), float(row["auroc"]), float(row["aupr"])),
                )
                for row in reader
            ]
        except (TypeError, ValueError) as err:
            raise OodWatermarkFormatError(f"{path.name}: malformed metrics row: {err}", 0) from err


def write_histogram_csv(path: Path, histogram: ScoreHistogram) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTOGRAM_HEADER)
        for index in range(histogram.id_counts.size):
            writer.writerow(
                [
                    f"{histogram.edges[index]:.9g}",
                    f"{histogram.edges[index + 1]:.9g}",
                    int(histogram.id_counts[index]),
                    int(histogram.ood_counts[index]),
                ]
            )
