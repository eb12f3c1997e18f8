"""Seed-wise aggregation of metrics files and score-distribution exports."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .const import DEFAULT_HISTOGRAM_BINS, FILE_SUMMARY, REPORT_DIR, SCORES_DIR, SEED_DIR_PREFIX
from .errors import OodWatermarkConfigError
from .metrics import ScoreHistogram, ScoreSet, read_metrics_csv, read_scores_csv, score_histogram

_LOGGER = logging.getLogger(__name__)

METRICS_GLOB = "metrics-*.csv"
SUMMARY_HEADER = [
    "run",
    "scorer",
    "watermarked",
    "ood_set",
    "seeds",
    "fpr95_mean",
    "fpr95_std",
    "auroc_mean",
    "auroc_std",
    "aupr_mean",
    "aupr_std",
]


@dataclass(frozen=True)
class SummaryRow:
    run: str
    scorer: str
    watermarked: bool
    ood_set: str
    seeds: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def seed_directories(run_dir: Path) -> list[Path]:
    return sorted(
        (p for p in run_dir.glob(f"{SEED_DIR_PREFIX}*") if p.is_dir()),
        key=lambda p: (len(p.name), p.name),
    )


def summarize(run_dir: Path) -> list[SummaryRow]:
    """Mean and population std of each metric over seeds, per (run tag, scorer, OOD set)."""
    grouped: dict[tuple[str, str, bool, str], list[tuple[float, float, float]]] = defaultdict(list)
    for seed_dir in seed_directories(run_dir):
        for metrics_file in sorted(seed_dir.glob(METRICS_GLOB)):
            tag = metrics_file.stem.removeprefix("metrics-")
            for row in read_metrics_csv(metrics_file):
                values = (row.metrics.fpr95, row.metrics.auroc, row.metrics.aupr)
                grouped[(tag, row.scorer, row.watermarked, row.ood_set)].append(values)
    if not grouped:
        raise OodWatermarkConfigError(f"no evaluated runs found under {run_dir}")
    rows = []
    for key in sorted(grouped):
        table = np.asarray(grouped[key], dtype=np.float64)
        mean = table.mean(axis=0)
        std = table.std(axis=0, ddof=0)
        rows.append(
            SummaryRow(
                *key,
                seeds=len(table),
                mean=(float(mean[0]), float(mean[1]), float(mean[2])),
                std=(float(std[0]), float(std[1]), float(std[2])),
            )
        )
    return rows


def write_summary_csv(path: Path, rows: list[SummaryRow]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for row in rows:
            stats = [f"{value:.6f}" for pair in zip(row.mean, row.std) for value in pair]
            writer.writerow([row.run, row.scorer, int(row.watermarked), row.ood_set, row.seeds, *stats])


def pooled_scores(run_dir: Path) -> dict[tuple[str, str], ScoreSet]:
    """Score files of every seed, pooled per (run tag, scorer__ood) stem."""
    pooled: dict[tuple[str, str], list[ScoreSet]] = defaultdict(list)
    for seed_dir in seed_directories(run_dir):
        scores_dir = seed_dir / SCORES_DIR
        if not scores_dir.is_dir():
            continue
        for path in sorted(scores_dir.glob("*/*.scores.csv")):
            pooled[(path.parent.name, path.name.removesuffix(".scores.csv"))].append(read_scores_csv(path))
    return {
        key: ScoreSet.of(
            np.concatenate([s.id_scores for s in sets]), np.concatenate([s.ood_scores for s in sets])
        )
        for key, sets in sorted(pooled.items())
    }


def write_histogram_dat(path: Path, histogram: ScoreHistogram) -> None:
    """Whitespace-separated columns that gnuplot reads directly."""
    lines = ["# bin_low bin_high id_count ood_count"]
    for index in range(histogram.id_counts.size):
        lines.append(
            f"{histogram.edges[index]:.9g} {histogram.edges[index + 1]:.9g} "
            f"{int(histogram.id_counts[index])} {int(histogram.ood_counts[index])}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_histogram(path: Path, histogram: ScoreHistogram, title: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as err:
        raise OodWatermarkConfigError("rendering needs matplotlib; install the 'plot' extra") from err
    widths = np.diff(histogram.edges)
    widths = np.where(widths > 0, widths, 1.0)
    figure, axes = plt.subplots(figsize=(5, 3.5))
    axes.bar(histogram.edges[:-1], histogram.id_counts, width=widths, align="edge", alpha=0.6, label="ID")
    axes.bar(histogram.edges[:-1], histogram.ood_counts, width=widths, align="edge", alpha=0.6, label="OOD")
    axes.set_xlabel("score")
    axes.set_ylabel("count")
    axes.set_title(title)
    axes.legend()
    figure.tight_layout()
    figure.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(figure)


def build_report(run_dir: Path, bins: int = DEFAULT_HISTOGRAM_BINS, render: bool = False) -> Path:
    """Write summary.csv and per-run histograms under <run_dir>/report; returns the summary path."""
    rows = summarize(run_dir)
    report_dir = run_dir / REPORT_DIR
    report_dir.mkdir(parents=True, exist_ok=True)
    summary_path = report_dir / FILE_SUMMARY
    write_summary_csv(summary_path, rows)
    for (tag, stem), scores in pooled_scores(run_dir).items():
        target = report_dir / tag
        target.mkdir(exist_ok=True)
        histogram = score_histogram(scores, bins)
        write_histogram_dat(target / f"{stem}.dat", histogram)
        if render:
            render_histogram(target / f"{stem}.png", histogram, f"{stem} ({tag})")
    _LOGGER.info("report for %d result groups written to %s", len(rows), report_dir)
    return summary_path
