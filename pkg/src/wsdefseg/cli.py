"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from dotenv import load_dotenv

from .config import RunConfig, Stage, SweepConfig, SynthConfig, apply_overrides, load_config
from .data import DatasetManifest, Split
from .errors import UsageError, WSDefSegError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose errors raise :class:`UsageError` instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------- config plumbing ----------


def _run_config(args: argparse.Namespace, stage: Stage) -> RunConfig:
    config = load_config(args.config, RunConfig)
    env_workers = os.getenv("WSDEFSEG_WORKERS")
    overrides: dict[str, Any] = {
        "plan.stage": stage,
        "plan.epochs": args.epochs,
        "plan.alpha": args.alpha,
        "plan.beta1": getattr(args, "beta1", None),
        "plan.beta2": getattr(args, "beta2", None),
        "plan.semi_weak": False if getattr(args, "consistency_only", False) else None,
        "plan.seed": args.seed,
        "plan.input_size": (args.size, args.size) if args.size else None,
        "sgd.learning_rate": args.lr,
        "sgd.batch_size": args.batch_size,
        "model.use_dten": False if args.no_dten else None,
        "workers": args.workers or (int(env_workers) if env_workers else None),
        "progress": False if args.no_progress else None,
    }
    return apply_overrides(config, overrides)


def _add_run_flags(p: argparse.ArgumentParser, semi: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON or YAML run config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float, help="weight of the sparse foreground loss")
    if semi:
        p.add_argument("--beta1", type=float, help="consistency weight for batches with labels")
        p.add_argument("--beta2", type=float, help="consistency weight for unlabeled batches")
        p.add_argument("--consistency-only", action="store_true", help="drop L_weak, train on beta2 * L_c alone")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, help="square training resolution, a multiple of 16")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-dten", action="store_true", help="backbone + head only")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-progress", action="store_true")


# ---------- commands ----------


def cmd_synth(args: argparse.Namespace) -> int:
    from .wpolyp import synthesize_dataset

    config = apply_overrides(
        load_config(args.config, SynthConfig),
        {
            "n_train": args.n_train,
            "n_test": args.n_test,
            "size": args.size,
            "seed": args.seed,
            "labeled_fraction": args.labeled_fraction,
        },
    )
    manifest = synthesize_dataset(config, args.out, progress=not args.no_progress)
    print(f"wrote {len(manifest.entries)} samples to {args.out}")
    return EXIT_OK


def cmd_train_weak(args: argparse.Namespace) -> int:
    from .trainer import train_weak_stage

    result = train_weak_stage(DatasetManifest.read(args.manifest), _run_config(args, Stage.WEAK), args.out)
    print(f"teacher checkpoint {result.checkpoint}, metrics {result.metrics}")
    return EXIT_OK


def cmd_train_full(args: argparse.Namespace) -> int:
    from .trainer import train_full_stage

    result = train_full_stage(DatasetManifest.read(args.manifest), _run_config(args, Stage.FULL), args.out)
    print(f"fully supervised checkpoint {result.checkpoint}, metrics {result.metrics}")
    return EXIT_OK


def cmd_pseudo(args: argparse.Namespace) -> int:
    from .trainer import generate_pseudo_labels

    config = _run_config(args, Stage.SEMI)
    cache = generate_pseudo_labels(args.checkpoint, DatasetManifest.read(args.manifest), config, args.out)
    print(f"wrote {len(cache.maps)} pseudo labels to {args.out}")
    return EXIT_OK


def cmd_train_semi(args: argparse.Namespace) -> int:
    from .trainer import PseudoLabelCache, train_semi_stage

    manifest = DatasetManifest.read(args.manifest)
    cache = PseudoLabelCache.load(args.cache)
    result = train_semi_stage(manifest, cache, args.teacher, _run_config(args, Stage.SEMI), args.out)
    print(f"student checkpoint {result.checkpoint}, metrics {result.metrics}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import evaluate

    size = (args.size, args.size) if args.size else None
    workers = args.workers or int(os.getenv("WSDEFSEG_WORKERS", "1"))
    report = evaluate(
        args.checkpoint,
        DatasetManifest.read(args.manifest),
        split=args.split,
        threshold=args.threshold,
        size=size,
        workers=workers,
        out_csv=args.out,
    )
    print(f"mDice {report.mdice:.4f} mIoU {report.miou:.4f} over {len(report.scores)} images")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    from .wpolyp import labeled_pixel_stats

    stats = labeled_pixel_stats(DatasetManifest.read(args.manifest), args.out)
    print(f"labeled pixels: {stats.overall_percent:.2f}% of the train split")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from .sweep import ablation_sweep

    config = load_config(args.config, SweepConfig)
    rows = ablation_sweep(config, args.out_dir, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import default_suite, run_suite

    results = run_suite(default_suite(args.seed))
    for r in results:
        print(f"{r.name:<24} {'ok' if r.passed else 'FAIL':<4} {r.max_rel_error:.2e} (< {r.tolerance:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("gradient checks failed: %s", failed)
        return EXIT_FAILURE
    return EXIT_OK


# ---------- parser ----------


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="wsdefseg", description="Weakly supervised segmentation with a deformable neck.")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ... (default: $WSDEFSEG_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="generate a synthetic scribble-annotated dataset")
    p.add_argument("--config", type=Path, help="JSON or YAML synthesis config")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-weak", help="train the teacher on scribbles")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="teacher checkpoint (.wsds)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train_weak)

    p = sub.add_parser("train-full", help="train the fully supervised reference on dense masks")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint (.wsds)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train_full)

    p = sub.add_parser("pseudo", help="write teacher pseudo labels for the train split")
    p.add_argument("--checkpoint", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="cache directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("train-semi", help="train the student with the gated semi-supervised loss")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True, help="pseudo-label cache directory")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint the cache was made with")
    p.add_argument("--out", type=Path, required=True, help="student checkpoint (.wsds)")
    _add_run_flags(p, semi=True)
    p.set_defaults(func=cmd_train_semi)

    p = sub.add_parser("eval", help="mDice / mIoU of a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--size", type=int, help="square evaluation resolution (default: native)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path, required=True, help="per-image CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="labeled-pixel statistics of the train split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="statistics CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="alpha / beta / neck ablation grid")
    p.add_argument("--config", type=Path, help="JSON or YAML sweep config")
    p.add_argument("--out-dir", type=Path, required=True, help="working directory for datasets and checkpoints")
    p.add_argument("--out", type=Path, required=True, help="sweep CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    level = (args.log_level or os.getenv("WSDEFSEG_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except UsageError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except WSDefSegError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILURE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
