"""The `wmark` command line: train-classifier, learn-watermark, evaluate, sweep, report."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from .config import ExperimentConfig, load_config
from .const import (
    DEFAULT_HISTOGRAM_BINS,
    DOMAIN,
    ENV_THREADS,
    EXIT_FORMAT,
    EXIT_OK,
    EXIT_UNEXPECTED,
    EXIT_USAGE,
    FILE_LOG,
)
from .errors import OodWatermarkConfigError, OodWatermarkError, OodWatermarkFormatError
from .experiment import MaskSpec, SeedRun, run_seeds
from .report import build_report

_LOGGER = logging.getLogger(__name__)

_CONSOLE_FORMAT = "%(levelname)s %(name)s: %(message)s"
_FILE_FORMAT = "%(asctime)s %(levelname)s [%(threadName)s] %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmark", description="Learn and evaluate OOD-detection watermarks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="run only this seed instead of the configured list")
    common.add_argument("--out", type=Path, help="output directory, overriding output_dir")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more console logging")
    verbs = parser.add_subparsers(dest="command", required=True, metavar="command")

    verbs.add_parser("train-classifier", parents=[common], help="train the MLP classifier")
    verbs.add_parser("learn-watermark", parents=[common], help="learn a watermark for the trained classifier")
    evaluate = verbs.add_parser("evaluate", parents=[common], help="score ID and test OOD sets")
    evaluate.add_argument("--watermark", action="store_true", help="add the learned watermark to every input")
    evaluate.add_argument("--mask", help="keep_large=<chi> or keep_small=<chi>; a 'p' prefix means percentile")
    evaluate.add_argument("--ood-positive", action="store_true", help="compute AUPR with OOD as the positive class")
    evaluate.add_argument("--bins", type=int, default=DEFAULT_HISTOGRAM_BINS, help="histogram bins")
    verbs.add_parser("sweep", parents=[common], help="random search over watermark hyperparameters")
    report = verbs.add_parser("report", parents=[common], help="aggregate evaluated seeds of a run directory")
    report.add_argument("--bins", type=int, default=DEFAULT_HISTOGRAM_BINS, help="histogram bins")
    report.add_argument("--render", action="store_true", help="also render PNG histograms (needs matplotlib)")
    return parser


_console: logging.Handler | None = None


def configure_logging(verbosity: int) -> None:
    """Console logging on stderr; replaces the handler a previous call installed."""
    global _console
    root = logging.getLogger()
    if _console is not None:
        root.removeHandler(_console)
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG)
    console.setFormatter(logging.Formatter(_CONSOLE_FORMAT))
    root.addHandler(console)
    _console = console


def attach_log_file(directory: Path) -> logging.Handler:
    """Append package records to the run directory's log file."""
    directory.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(directory / FILE_LOG, encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(_FILE_FORMAT))
    logging.getLogger(DOMAIN).addHandler(handler)
    return handler


def thread_limit(seed_count: int) -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return min(seed_count, os.cpu_count() or 1)
    try:
        limit = int(raw)
    except ValueError as err:
        raise OodWatermarkConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from err
    if limit < 1:
        raise OodWatermarkConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    return limit


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise OodWatermarkConfigError(f"{args.command} needs --config")
    config = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    if config.output_dir is None:
        raise OodWatermarkConfigError("no output directory: set output_dir in the config or pass --out")
    return config


def run_command(args: argparse.Namespace) -> None:
    if args.command == "report":
        run_dir = args.out or (_experiment(args).output_dir if args.config else None)
        if run_dir is None:
            raise OodWatermarkConfigError("report needs --out or a --config with output_dir")
        if args.bins < 1:
            raise OodWatermarkConfigError(f"--bins must be >= 1, got {args.bins}")
        build_report(Path(run_dir), args.bins, args.render)
        return

    config = _experiment(args)
    assert config.output_dir is not None
    handler = attach_log_file(config.output_dir)
    try:
        mask = MaskSpec.parse(args.mask) if getattr(args, "mask", None) else None
        if getattr(args, "bins", 1) < 1:
            raise OodWatermarkConfigError(f"--bins must be >= 1, got {args.bins}")

        def job(seed: int) -> None:
            run = SeedRun(config, seed)
            if args.command == "train-classifier":
                run.train_classifier()
            elif args.command == "learn-watermark":
                run.learn_watermark()
            elif args.command == "evaluate":
                run.evaluate(args.watermark, mask, not args.ood_positive, args.bins)
            else:
                run.sweep()

        run_seeds(config.seeds, job, thread_limit(len(config.seeds)))
    finally:
        logging.getLogger(DOMAIN).removeHandler(handler)
        handler.close()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        run_command(args)
    except OodWatermarkFormatError as err:
        _LOGGER.error("%s", err)
        return EXIT_FORMAT
    except (OodWatermarkError, FileNotFoundError) as err:
        _LOGGER.error("%s", err)
        return EXIT_USAGE
    except Exception:  # pylint: disable=broad-except
        _LOGGER.exception("Unexpected exception")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
