import threading

import numpy as np
import pytest

from ood_watermark.config import BlobsDatasetSpec
from ood_watermark.errors import OodWatermarkConfigError
from ood_watermark.experiment import MaskSpec, check_compatibility, load_id_data, run_seeds, start_point
from ood_watermark.metrics import DetectionMetrics, MetricsRow, write_metrics_csv
from ood_watermark.report import summarize, write_summary_csv
from ood_watermark.scoring import FreeEnergyScorer, OdinScorer, ReActScorer, SoftmaxScorer
from ood_watermark.watermark import FreeEnergyObjective, MaskMode, SoftmaxObjective, WatermarkConfig


def test_mask_spec_parsing():
    absolute = MaskSpec.parse("keep_large=0.05")
    assert absolute == MaskSpec(MaskMode.KEEP_LARGE, 0.05, False)
    assert absolute.tag == "masked-keep_large-0.05"
    percentile = MaskSpec.parse("keep_small=p50")
    assert percentile.percentile and percentile.value == 50.0
    assert percentile.tag == "masked-keep_small-p50"
    w = np.array([0.1, -0.5, 0.05, 0.9], dtype=np.float32)
    assert percentile.threshold(w) == pytest.approx(0.3)
    assert percentile.apply(w).tolist() == pytest.approx([0.1, 0.0, 0.05, 0.0])


@pytest.mark.parametrize("text", ["keep_all=0.1", "keep_large", "keep_large=-1", "keep_small=p150"])
def test_bad_mask_specs(text):
    with pytest.raises(OodWatermarkConfigError):
        MaskSpec.parse(text)


def test_scorer_and_loss_must_match():
    energy = WatermarkConfig(objective=FreeEnergyObjective())
    softmax = WatermarkConfig(objective=SoftmaxObjective())
    check_compatibility(FreeEnergyScorer(), energy)
    check_compatibility(ReActScorer(FreeEnergyScorer()), energy)
    check_compatibility(OdinScorer(), softmax)
    with pytest.raises(OodWatermarkConfigError):
        check_compatibility(SoftmaxScorer(), energy)
    with pytest.raises(OodWatermarkConfigError):
        check_compatibility(FreeEnergyScorer(), softmax)


def test_start_point_snaps_to_candidates():
    cfg = WatermarkConfig.defaults_for(FreeEnergyObjective())
    snapped = start_point(cfg, {"beta": [0.0, 0.08, 1.0], "t2": [0.5, 1.0]})
    assert snapped.beta == 0.08
    assert snapped.objective.t2 == 0.5
    assert snapped.rho == cfg.rho
    assert start_point(cfg, {"rho": [0.7]}) == cfg


def test_blob_data_depends_only_on_the_seed():
    spec = BlobsDatasetSpec(2, 4, 10.0, 50, 20)
    first = load_id_data(spec, 1)
    second = load_id_data(spec, 1)
    other = load_id_data(spec, 2)
    assert np.array_equal(first.train.inputs, second.train.inputs)
    assert not np.array_equal(first.train.inputs, other.train.inputs)
    assert np.all(first.stats.std == 1.0)


def test_holdout_split_leaves_the_test_split_alone():
    data = load_id_data(BlobsDatasetSpec(2, 4, 10.0, 50, 20), 1)
    fit, held = data.holdout_split(7)
    assert (fit.size, held.size) == (45, 5)
    rows = {tuple(row) for row in np.concatenate([fit.inputs, held.inputs]).tolist()}
    assert rows == {tuple(row) for row in data.train.inputs.tolist()}
    test_rows = {tuple(row) for row in data.test.inputs.tolist()}
    assert not rows & test_rows
    again, _ = data.holdout_split(7)
    assert np.array_equal(fit.inputs, again.inputs)
    assert data.holdout_split(1, fraction=0.001)[1].size == 1


def test_run_seeds_keeps_order_and_uses_threads():
    names = set()

    def job(seed):
        names.add(threading.current_thread().name)
        return seed * 10

    assert run_seeds([3, 1, 2], job, 1) == [30, 10, 20]
    assert run_seeds([3, 1, 2], job, 3) == [30, 10, 20]
    assert any(name.startswith("seed") for name in names)


def test_summary_over_seeds(tmp_path):
    for seed, auroc in enumerate((0.8, 0.9, 1.0)):
        directory = tmp_path / f"seed-{seed}"
        directory.mkdir()
        metrics = DetectionMetrics(fpr95=0.5, auroc=auroc, aupr=0.7)
        write_metrics_csv(directory / "metrics-clean.csv", [MetricsRow("free_energy", False, "box", metrics)])
    (row,) = summarize(tmp_path)
    assert (row.run, row.scorer, row.watermarked, row.ood_set, row.seeds) == ("clean", "free_energy", False, "box", 3)
    assert row.mean == pytest.approx((0.5, 0.9, 0.7))
    assert row.std == pytest.approx((0.0, 0.0816497, 0.0), abs=1e-6)
    path = tmp_path / "summary.csv"
    write_summary_csv(path, [row])
    assert path.read_text().splitlines()[1] == (
        "clean,free_energy,0,box,3,0.500000,0.000000,0.900000,0.081650,0.700000,0.000000"
    )


def test_summary_needs_evaluated_runs(tmp_path):
    with pytest.raises(OodWatermarkConfigError):
        summarize(tmp_path)
