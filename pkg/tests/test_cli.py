import csv
import json

import pytest

from ood_watermark.cli import main

TINY = {
    "id_dataset": {"kind": "gaussian_blobs", "input_dim": 4, "train_size": 200, "test_size": 100},
    "ood_datasets": [
        {"name": "box", "kind": "uniform_box", "size": 100},
        {"name": "near-box", "kind": "uniform_box", "size": 60, "bound": 2.0, "role": "validation"},
    ],
    "model": {"hidden_dims": [8], "train": {"epochs": 3, "batch_size": 32, "lr": 0.01}},
    "scorers": [{"kind": "free_energy"}, {"kind": "softmax"}, {"kind": "react"}],
    "watermark": {"epochs": 2, "batch_size": 50, "lr_decay_epochs": [1]},
    "sweep": {"trials": 1, "space": {"beta": [0.1], "sigma1": [0.6], "rho": [0.7]}},
}


def _write_config(directory, **changes):
    document = {**TINY, **changes}
    path = directory / "experiment.json"
    path.write_text(json.dumps(document))
    return path


def _rows(path):
    with path.open(newline="") as handle:
        return list(csv.DictReader(handle))


@pytest.fixture
def config_path(tmp_path):
    return _write_config(tmp_path)


@pytest.fixture
def trained(tmp_path, config_path):
    out = tmp_path / "run"
    assert main(["train-classifier", "--config", str(config_path), "--out", str(out)]) == 0
    return out


def test_train_classifier_writes_artifacts(trained):
    seed_dir = trained / "seed-0"
    assert (seed_dir / "model.wmk").read_bytes()[:4] == b"WMK1"
    assert (seed_dir / "stats.wmkn").read_bytes()[:4] == b"WMKN"
    report = {row["split"]: float(row["accuracy"]) for row in _rows(seed_dir / "train_report.csv")}
    assert set(report) == {"train", "test"}
    assert (trained / "wmark.log").exists()


def test_training_is_reproducible(tmp_path, config_path, trained):
    again = tmp_path / "again"
    assert main(["train-classifier", "--config", str(config_path), "--out", str(again)]) == 0
    assert (again / "seed-0" / "model.wmk").read_bytes() == (trained / "seed-0" / "model.wmk").read_bytes()


def test_full_pipeline(config_path, trained):
    common = ["--config", str(config_path), "--out", str(trained)]
    assert main(["learn-watermark", *common]) == 0
    seed_dir = trained / "seed-0"
    assert (seed_dir / "watermark.wmkw").read_bytes()[:4] == b"WMKW"
    trace = _rows(seed_dir / "watermark_trace.csv")
    assert [row["epoch"] for row in trace] == ["0", "1"]
    assert [float(row["step_size"]) for row in trace] == pytest.approx([0.01, 0.001])
    assert _rows(seed_dir / "watermark_report.csv")[0]["split"] == "test"

    assert main(["evaluate", *common]) == 0
    clean_text = (seed_dir / "metrics-clean.csv").read_text()
    assert main(["evaluate", *common]) == 0
    assert (seed_dir / "metrics-clean.csv").read_text() == clean_text
    clean = _rows(seed_dir / "metrics-clean.csv")
    assert [row["scorer"] for row in clean] == ["free_energy", "softmax", "react_free_energy"]
    assert {row["ood_set"] for row in clean} == {"box"}
    assert (seed_dir / "scores" / "clean" / "free_energy__box.scores.csv").exists()
    assert (seed_dir / "scores" / "clean" / "softmax__box.hist.csv").exists()

    assert main(["evaluate", "--watermark", *common]) == 0
    marked = _rows(seed_dir / "metrics-watermarked.csv")
    assert all(row["watermarked"] == "1" for row in marked)

    assert main(["evaluate", "--watermark", "--mask", "keep_large=1000000", *common]) == 0
    masked = _rows(seed_dir / "metrics-masked-keep_large-1e+06.csv")
    for zeroed, plain in zip(masked, clean):
        assert [zeroed[k] for k in ("scorer", "fpr95", "auroc", "aupr")] == [
            plain[k] for k in ("scorer", "fpr95", "auroc", "aupr")
        ]

    assert main(["report", "--out", str(trained)]) == 0
    summary = _rows(trained / "report" / "summary.csv")
    assert {row["run"] for row in summary} == {"clean", "watermarked", "masked-keep_large-1e+06"}
    assert all(row["seeds"] == "1" and float(row["auroc_std"]) == 0.0 for row in summary)
    assert (trained / "report" / "clean" / "free_energy__box.dat").exists()


def test_sweep_with_a_single_point(config_path, trained):
    assert main(["sweep", "--config", str(config_path), "--out", str(trained)]) == 0
    rows = _rows(trained / "seed-0" / "sweep.csv")
    assert len(rows) == 1
    assert rows[0]["rank"] == "1"
    assert (rows[0]["beta"], rows[0]["sigma1"], rows[0]["rho"]) == ("0.1", "0.6", "0.7")
    assert (rows[0]["t1"], rows[0]["t2"]) == ("0.2", "0.7")


def test_sweep_ranks_the_default_point(tmp_path):
    space = {"beta": [0.0, 0.1], "sigma1": [0.3, 0.6], "rho": [0.7]}
    config_path = _write_config(tmp_path, sweep={"trials": 3, "space": space})
    common = ["--config", str(config_path), "--out", str(tmp_path / "run")]
    assert main(["train-classifier", *common]) == 0
    assert main(["sweep", *common]) == 0
    rows = _rows(tmp_path / "run" / "seed-0" / "sweep.csv")
    assert [row["rank"] for row in rows] == [str(rank) for rank in range(1, len(rows) + 1)]
    default = next(row for row in rows if (row["beta"], row["sigma1"], row["rho"]) == ("0.1", "0.6", "0.7"))
    assert float(rows[0]["fpr95"]) <= float(default["fpr95"])
    assert [float(row["fpr95"]) for row in rows] == sorted(float(row["fpr95"]) for row in rows)


def test_reruns_are_byte_identical(tmp_path, config_path):
    outputs = [tmp_path / "first", tmp_path / "second"]
    for out in outputs:
        common = ["--config", str(config_path), "--out", str(out)]
        for verb in (["train-classifier"], ["learn-watermark"], ["evaluate"], ["evaluate", "--watermark"], ["sweep"]):
            assert main([*verb, *common]) == 0
        assert main(["report", "--out", str(out)]) == 0

    produced = [
        "seed-0/watermark.wmkw",
        "seed-0/watermark_trace.csv",
        "seed-0/sweep.csv",
        "report/summary.csv",
        "report/clean/free_energy__box.dat",
        "report/watermarked/free_energy__box.dat",
    ]
    first, second = outputs
    for name in produced:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name

    before = {name: (first / name).read_bytes() for name in produced if name.startswith("report/")}
    assert main(["report", "--out", str(first)]) == 0
    assert {name: (first / name).read_bytes() for name in before} == before


def test_several_seeds_in_parallel(tmp_path, monkeypatch):
    config_path = _write_config(tmp_path, seeds=[0, 1])
    monkeypatch.setenv("WMARK_THREADS", "2")
    out = tmp_path / "run"
    assert main(["train-classifier", "--config", str(config_path), "--out", str(out)]) == 0
    assert main(["evaluate", "--config", str(config_path), "--out", str(out)]) == 0
    assert (out / "seed-0" / "metrics-clean.csv").exists()
    assert (out / "seed-1" / "metrics-clean.csv").exists()
    assert main(["train-classifier", "--config", str(config_path), "--out", str(out), "--seed", "5"]) == 0
    assert (out / "seed-5" / "model.wmk").exists()


def test_usage_errors(tmp_path, config_path, monkeypatch):
    out = str(tmp_path / "run")
    assert main(["train-classifier", "--config", str(tmp_path / "absent.json"), "--out", out]) == 2
    assert main(["train-classifier", "--config", str(config_path)]) == 2
    assert main(["evaluate", "--config", str(config_path), "--out", out]) == 2
    assert main(["evaluate", "--config", str(config_path), "--out", out, "--mask", "keep_large=0.1"]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 2
    monkeypatch.setenv("WMARK_THREADS", "zero")
    assert main(["train-classifier", "--config", str(config_path), "--out", out]) == 2


def test_watermark_needs_a_matching_scorer(tmp_path):
    config_path = _write_config(tmp_path, watermark={"loss": "softmax", "scorer": {"kind": "free_energy"}})
    assert main(["learn-watermark", "--config", str(config_path), "--out", str(tmp_path / "run")]) == 2


def test_empty_search_space_is_rejected(tmp_path):
    config_path = _write_config(tmp_path, sweep={"space": {}})
    assert main(["sweep", "--config", str(config_path), "--out", str(tmp_path / "run")]) == 2


def test_corrupt_checkpoint(config_path, trained):
    (trained / "seed-0" / "model.wmk").write_bytes(b"junk")
    assert main(["evaluate", "--config", str(config_path), "--out", str(trained)]) == 3


def test_watermark_before_learning(config_path, trained):
    assert main(["evaluate", "--watermark", "--config", str(config_path), "--out", str(trained)]) == 2
