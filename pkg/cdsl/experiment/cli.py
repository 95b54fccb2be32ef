"""``cdsl`` command line.

Every experiment subcommand accepts ``--preset``, ``--config`` and any number
of dotted ``--key value`` overrides (``--train.epochs 5``,
``--network.scale_inputs [0.5]``), applied in that order.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, NoReturn, Optional, Sequence

from cdsl import __version__
from cdsl.data.dataset import dataset_summary, save_dataset
from cdsl.data.synth import synth_dataset
from cdsl.errors import CheckpointError, ConfigError, DataError, NumericalError, ShapeError
from cdsl.train.gradcheck import COMPONENTS, TOLERANCE, check_all
from cdsl.utils.logging_setup import configure_logging

from .config import ExperimentConfig, list_presets, parse_value, resolve_config
from .runner import run_cv, run_eval, run_predict, run_train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_NUMERIC = 2

USER_ERRORS = (ConfigError, DataError, ShapeError, CheckpointError, FileNotFoundError)


class CLIParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with EXIT_USER_ERROR instead of 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER_ERROR, f"{self.prog}: error: {message}\n")


def parse_overrides(extra: Sequence[str]) -> Dict[str, Any]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into dotted overrides.

    Raises:
        ConfigError: On a token that is not a flag or a flag without a value.
    """
    overrides: Dict[str, Any] = {}
    tokens = list(extra)
    while tokens:
        token = tokens.pop(0)
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"Unexpected argument '{token}'; overrides look like --key value")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if not tokens or (tokens[0].startswith("--") and len(tokens[0]) > 2):
                raise ConfigError(f"Override --{key} needs a value")
            value = tokens.pop(0)
        overrides[key] = parse_value(value)
    return overrides


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=list_presets(), help="Shipped experiment preset")
    parser.add_argument("--config", help="JSON config file, e.g. a previous run.json")
    parser.add_argument("--output-dir", help="Run directory (overrides output_dir)")
    parser.add_argument("--threads", type=int, help="Cap on worker threads/processes")


def build_parser() -> argparse.ArgumentParser:
    parser = CLIParser(
        prog="cdsl", description="Cascaded dual-scale LinkNet segmentation experiments."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Logging level (default: CDSL_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write a synthetic dataset in the PNG layout")
    synth.add_argument("--out", required=True, help="Dataset root to create")
    synth.add_argument("--n", type=int, default=16, help="Number of samples")
    synth.add_argument("--size", type=int, default=64, help="Image side length")
    synth.add_argument("--seed", type=int, default=0, help="Generator seed")

    for name, help_text in (
        ("train", "Train one network on an 80/20 split"),
        ("cascade-train", "Train a two-stage cascade on an 80/20 split"),
        ("cv", "k-fold cross-validation"),
    ):
        command = sub.add_parser(name, help=help_text)
        _add_config_options(command)
        if name == "cv":
            command.add_argument(
                "--parallel-folds", action="store_true", help="Run folds in worker processes"
            )

    evaluate = sub.add_parser("eval", help="Score a saved model on a dataset")
    evaluate.add_argument("--model", required=True, help="Manifest file or model directory")
    _add_config_options(evaluate)

    predict = sub.add_parser("predict", help="Write probability and mask PNGs for one image")
    predict.add_argument("--model", required=True, help="Manifest file or model directory")
    predict.add_argument("--image", required=True, help="8-bit grayscale PNG")
    predict.add_argument("--out", required=True, help="Output prefix")
    predict.add_argument("--threshold", type=float, default=0.5, help="Mask threshold")

    grad = sub.add_parser("grad-check", help="Finite-difference gradient checks")
    grad.add_argument(
        "--component",
        action="append",
        choices=sorted(COMPONENTS),
        help="Component to check (repeatable; default: all)",
    )
    grad.add_argument("--seed", type=int, default=0, help="Seed for inputs and weights")
    grad.add_argument("--tolerance", type=float, default=TOLERANCE, help="Max relative error")
    grad.add_argument("--json", action="store_true", help="Print results as JSON")
    return parser


def _resolve(args: argparse.Namespace, extra: Sequence[str]) -> ExperimentConfig:
    overrides = parse_overrides(extra)
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.command == "cascade-train":
        overrides["cascade"] = True
    return resolve_config(args.preset, args.config, overrides)


def _synth(args: argparse.Namespace) -> int:
    samples = synth_dataset(args.n, args.size, args.seed)
    root = save_dataset(samples, args.out)
    print(json.dumps({"root": str(root), **dataset_summary(samples)}, indent=2))
    return EXIT_OK


def _grad_check(args: argparse.Namespace) -> int:
    results = check_all(args.component, seed=args.seed)
    failed = [r.component for r in results if not r.passed(args.tolerance)]
    if args.json:
        print(json.dumps([r.to_dict() for r in results], indent=2))
    else:
        for r in results:
            status = "ok" if r.passed(args.tolerance) else "FAIL"
            print(
                f"{r.component:<18} max_rel_error={r.max_rel_error:.3e} "
                f"checked={r.checked} skipped={r.skipped} {status}"
            )
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def dispatch(args: argparse.Namespace, extra: Sequence[str]) -> int:
    if args.command == "synth":
        return _synth(args)
    if args.command == "grad-check":
        return _grad_check(args)
    if args.command == "predict":
        for path in run_predict(args.model, args.image, args.out, args.threshold):
            print(path)
        return EXIT_OK

    config = _resolve(args, extra)
    if args.command in ("train", "cascade-train"):
        print(run_train(config))
    elif args.command == "eval":
        report = run_eval(args.model, config)
        print(json.dumps(report.aggregate(), indent=2))
    elif args.command == "cv":
        cv = run_cv(config, parallel_folds=args.parallel_folds)
        print(json.dumps({"mean_dice": cv.mean_dice, "mean_miou": cv.mean_miou}, indent=2))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on config/data errors, 2 on numeric failure."""
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command in ("synth", "predict", "grad-check"):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USER_ERROR
    configure_logging(args.log_level)
    try:
        return dispatch(args, extra)
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERIC
    except USER_ERRORS as e:
        logger.error("%s", e)
        return EXIT_USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
