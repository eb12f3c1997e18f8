import numpy as np
import pytest

from ood_watermark.errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError
from ood_watermark.metrics import (
    DetectionMetrics,
    MetricsRow,
    ScoreSample,
    ScoreSet,
    aupr,
    auroc,
    evaluate_detection,
    fpr_at_tpr,
    read_metrics_csv,
    read_scores_csv,
    score_histogram,
    write_histogram_csv,
    write_metrics_csv,
    write_scores_csv,
)


def _pairwise_auroc(ids, oods):
    total = 0.0
    for a in ids:
        for b in oods:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(ids) * len(oods))


def _enumerated_fpr(ids, oods, target=0.95):
    best = None
    for candidate in ids:
        recall = sum(1 for s in ids if s >= candidate) / len(ids)
        if recall >= target and (best is None or candidate > best):
            best = candidate
    return sum(1 for s in oods if s >= best) / len(oods)


def _enumerated_aupr(ids, oods):
    area = 0.0
    previous_recall = 0.0
    for threshold in sorted(set(ids) | set(oods), reverse=True):
        tp = sum(1 for s in ids if s >= threshold)
        fp = sum(1 for s in oods if s >= threshold)
        recall = tp / len(ids)
        area += tp / (tp + fp) * (recall - previous_recall)
        previous_recall = recall
    return area


def _random_instances(count=200):
    generator = np.random.default_rng(2024)
    for _ in range(count):
        n_id = int(generator.integers(1, 100))
        n_ood = int(generator.integers(1, 100))
        levels = int(generator.integers(2, 30))
        ids = generator.integers(0, levels, n_id) / 4.0 + generator.integers(0, 2)
        oods = generator.integers(0, levels, n_ood) / 4.0
        yield ids.tolist(), oods.tolist()


def test_auroc_examples():
    assert auroc(ScoreSet.of([0.9, 0.8], [0.1, 0.2])) == 1.0
    assert auroc(ScoreSet.of([1.0], [1.0])) == 0.5
    assert auroc(ScoreSet.of([1.0, 3.0], [2.0, 2.0])) == 0.5


def test_fpr_examples():
    assert fpr_at_tpr(ScoreSet.of(range(1, 21), [0.5, 10.5])) == 0.5
    assert fpr_at_tpr(ScoreSet.of([5.0, 6.0, 7.0], [1.0, 2.0])) == 0.0
    assert fpr_at_tpr(ScoreSet.of([5.0, 6.0, 7.0], [8.0, 9.0])) == 1.0


def test_aupr_examples():
    assert aupr(ScoreSet.of([3.0, 4.0], [1.0, 2.0])) == 1.0
    assert aupr(ScoreSet.of([1.0, 1.0], [1.0, 1.0, 1.0])) == pytest.approx(0.4)
    assert aupr(ScoreSet.of([3.0, 1.0], [2.0])) == pytest.approx(5.0 / 6.0)


def test_metrics_match_exhaustive_oracles():
    for ids, oods in _random_instances():
        scores = ScoreSet.of(ids, oods)
        assert auroc(scores) == pytest.approx(_pairwise_auroc(ids, oods), abs=1e-9)
        assert fpr_at_tpr(scores) == pytest.approx(_enumerated_fpr(ids, oods), abs=1e-9)
        assert aupr(scores) == pytest.approx(_enumerated_aupr(ids, oods), abs=1e-9)


def test_metrics_ignore_monotone_transforms():
    for ids, oods in list(_random_instances(40)):
        base = evaluate_detection(ScoreSet.of(ids, oods))
        for transform in (lambda s: 3.0 * s + 7.0, np.exp):
            moved = evaluate_detection(ScoreSet.of(transform(np.asarray(ids)), transform(np.asarray(oods))))
            assert moved.auroc == pytest.approx(base.auroc, abs=1e-9)
            assert moved.fpr95 == pytest.approx(base.fpr95, abs=1e-9)
            assert moved.aupr == pytest.approx(base.aupr, abs=1e-9)


def test_flipping_roles_keeps_auroc():
    for ids, oods in list(_random_instances(40)):
        scores = ScoreSet.of(ids, oods)
        assert auroc(scores.flipped()) == pytest.approx(auroc(scores), abs=1e-12)


def test_aupr_with_ood_positive():
    scores = ScoreSet.of([3.0, 1.0], [2.0])
    assert aupr(scores, id_positive=False) == pytest.approx(aupr(scores.flipped()))
    assert aupr(ScoreSet.of([3.0, 4.0], [1.0, 2.0]), id_positive=False) == 1.0


def test_samples_and_score_sets_agree():
    samples = [ScoreSample(0.9, True), ScoreSample(0.2, False), ScoreSample(0.4, True)]
    scores = ScoreSet.from_samples(samples)
    assert scores.id_scores.tolist() == [0.9, 0.4]
    assert auroc(samples) == auroc(scores) == 1.0


def test_metrics_need_both_classes():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        auroc(ScoreSet.of([1.0], []))
    with pytest.raises(OodWatermarkInvalidArgumentError):
        fpr_at_tpr([ScoreSample(1.0, False)])
    with pytest.raises(OodWatermarkInvalidArgumentError):
        ScoreSample(float("nan"), True)


def test_histogram():
    single = score_histogram(ScoreSet.of([0.3], []), 5)
    assert single.id_counts.tolist() == [0, 0, 0, 0, 1]
    flat = score_histogram(ScoreSet.of([2.0, 2.0], [2.0]), 4)
    assert flat.id_counts.tolist() == [0, 0, 0, 2]
    assert flat.ood_counts.tolist() == [0, 0, 0, 1]
    spread = score_histogram(ScoreSet.of([0.0, 0.5, 1.0, 1.0], [0.1, 0.9]), 2)
    assert spread.edges.tolist() == [0.0, 0.5, 1.0]
    assert spread.id_counts.tolist() == [1, 3]
    assert spread.ood_counts.tolist() == [1, 1]
    with pytest.raises(OodWatermarkInvalidArgumentError):
        score_histogram(ScoreSet.of([1.0], [1.0]), 0)


def test_histogram_counts_cover_every_sample():
    generator = np.random.default_rng(5)
    scores = ScoreSet.of(generator.normal(size=137), generator.normal(1.0, size=59))
    histogram = score_histogram(scores, 30)
    assert histogram.id_counts.sum() == 137
    assert histogram.ood_counts.sum() == 59


def test_scores_csv_round_trip(tmp_path):
    scores = ScoreSet.of([0.1, 1 / 3], [-2.5])
    path = tmp_path / "free_energy__box.scores.csv"
    write_scores_csv(path, scores)
    assert path.read_text().splitlines()[0] == "score,is_id"
    restored = read_scores_csv(path)
    assert restored.id_scores.tolist() == [0.1, 1 / 3]
    assert restored.ood_scores.tolist() == [-2.5]


def test_metrics_csv_format(tmp_path):
    path = tmp_path / "metrics-clean.csv"
    write_metrics_csv(path, [MetricsRow("free_energy", False, "box", DetectionMetrics(0.25, 0.9, 1.0 / 3.0))])
    assert path.read_text().splitlines() == [
        "scorer,watermarked,ood_set,fpr95,auroc,aupr",
        "free_energy,0,box,0.250000,0.900000,0.333333",
    ]
    (row,) = read_metrics_csv(path)
    assert row.metrics.aupr == pytest.approx(0.333333)
    assert not row.watermarked
    broken = tmp_path / "broken.csv"
    broken.write_text("a,b\n1,2\n")
    with pytest.raises(OodWatermarkFormatError):
        read_metrics_csv(broken)


def test_histogram_csv(tmp_path):
    path = tmp_path / "hist.csv"
    write_histogram_csv(path, score_histogram(ScoreSet.of([0.0, 1.0], [1.0]), 2))
    assert path.read_text().splitlines() == ["bin_low,bin_high,id_count,ood_count", "0,0.5,1,0", "0.5,1,1,1"]
