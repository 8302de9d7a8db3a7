"""
Command-line entry point.

Every command logs structured events to stderr and prints its result as
JSON on stdout. Library errors exit with status 2, anything unexpected with
status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

import structlog

from protoguard import __version__
from protoguard.core.config import get_settings
from protoguard.core.errors import ProtoGuardError
from protoguard.core.logging import configure_logging
from protoguard.schemas.config import (
    AblationGrid,
    ExperimentConfig,
    SyntheticDatasetSpec,
    load_attack_specs,
    load_model,
)
from protoguard.services import ablation, benchmark, dataset, evaluation, training, verification

logger = structlog.get_logger(__name__)


def _int_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got '{raw}'") from exc


def _emit(payload: object) -> None:
    json.dump(payload, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    config: ExperimentConfig = load_model(ExperimentConfig, args.config)
    if args.seed is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    return config


# Commands ------------------------------------------------------------------


def cmd_generate_data(args: argparse.Namespace) -> int:
    spec: SyntheticDatasetSpec = load_model(SyntheticDatasetSpec, args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    out = dataset.generate_dataset(spec, args.out)
    _emit({"dataset": str(out), "images": spec.classes * spec.images_per_class})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment(args)
    data = dataset.load_dataset(args.data, config.train.image_size)
    summary = training.train(config, data, args.out, workers=args.threads)
    _emit(summary.model_dump())
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    specs = load_attack_specs(args.attacks)
    data = dataset.load_dataset(args.data)
    report = evaluation.evaluate(args.checkpoint, data, specs, args.clean_pass_rate, args.out)
    _emit(report.model_dump(mode="json"))
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    specs = load_attack_specs(args.attacks)
    data = dataset.load_dataset(args.data)
    manifest = evaluation.materialize_attacks(args.checkpoint, data, specs, args.out)
    _emit({"manifest": str(manifest)})
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _experiment(args)
    grid: AblationGrid = load_model(AblationGrid, args.grid)
    data = dataset.load_dataset(args.data, config.train.image_size)
    report = ablation.ablate(config, grid, data, args.out, workers=args.threads)
    _emit(report.model_dump(mode="json"))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = verification.run_gradchecks(args.module, configurations=args.configurations)
    _emit([row.model_dump() for row in rows])
    return 0 if all(row.passed for row in rows) else 1


def cmd_bench(args: argparse.Namespace) -> int:
    rows = benchmark.bench_paa(
        args.variant,
        sizes=args.sizes,
        workers=args.workers,
        repeats=args.repeats,
        seed=args.seed or 0,
    )
    _emit([row.model_dump() for row in rows])
    return 0


# Parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoguard", description="Unsupervised adversarial-example detection"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    parser.add_argument("--threads", type=int, default=None, help="Worker-pool size")
    parser.add_argument("--verbose", action="store_true", help="Debug logging in console format")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        name: str, handler: Callable[[argparse.Namespace], int], summary: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=summary)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("generate-data", cmd_generate_data, "Write the procedural shape dataset")
    sub.add_argument("--spec", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("train", cmd_train, "Train an encoder")
    sub.add_argument("--config", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("evaluate", cmd_evaluate, "Calibrate the detector and report detection rates")
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--attacks", type=Path, required=True)
    sub.add_argument("--clean-pass-rate", type=float, default=0.95)
    sub.add_argument("--out", type=Path, default=None)

    sub = command("attack", cmd_attack, "Write attacked copies of the test images")
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--attacks", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("ablate", cmd_ablate, "Train and evaluate a grid of ablations")
    sub.add_argument("--config", type=Path, required=True)
    sub.add_argument("--grid", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("gradcheck", cmd_gradcheck, "Finite-difference gradient checks")
    sub.add_argument("--module", choices=["all", *verification.SUITES], default="all")
    sub.add_argument("--configurations", type=int, default=5)

    sub = command("bench", cmd_bench, "Time sequential against concurrent PAA branches")
    sub.add_argument("--workers", type=_int_list, default=[1, 2, 4])
    sub.add_argument("--sizes", type=_int_list, default=[16, 32, 64])
    sub.add_argument("--variant", default="XS")
    sub.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    if args.verbose:
        configure_logging("DEBUG", "console")
    else:
        configure_logging(settings.log_level, settings.log_format)
    if args.threads is None:
        args.threads = settings.threads
    if args.seed is None and settings.seed:
        args.seed = settings.seed

    try:
        return args.handler(args)
    except ProtoGuardError as exc:
        logger.error("Command failed", command=args.command, error_type=type(exc).__name__, error=str(exc))
        return 2
    except Exception as exc:
        logger.error("Unexpected error", command=args.command, error=str(exc), exc_info=True)
        return 1
