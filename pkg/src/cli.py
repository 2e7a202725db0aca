#!/usr/bin/env python3
"""CLI interface for the trustsync pipeline."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from .core import RunConfig, TrustSyncError, get_config, get_logger, reset_logging, setup_logging
from .pipeline import (
    DEFAULT_THETAS,
    FEATURE_METHODS,
    discover_reports,
    run_control,
    run_grid,
    run_preprocess,
    run_report,
    run_sweep,
    run_synchrony,
    run_synth,
    run_train,
)
from .prediction import default_alpha_grid, default_lambda_grid

logger = get_logger("cli")
console = Console()


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_config(args) -> RunConfig:
    path = args.config or os.environ.get("TRUSTSYNC_CONFIG")
    config = get_config(Path(path) if path else None)
    return config.with_overrides(seed=args.seed, jobs=args.jobs)


def _features_path(args) -> Path:
    if args.features:
        return Path(args.features)
    return Path(args.out) / f"features_{args.method}.csv"


def cmd_preprocess(args, config: RunConfig):
    """Quality-gate, smooth, impute and decompose every session in a manifest."""
    if args.impute:
        config = config.with_overrides(impute=True)
    summary = run_preprocess(Path(args.manifest), Path(args.out), config, jobs=config.jobs)
    table = Table(title="Preprocess")
    table.add_column("retained", justify="right")
    table.add_column("excluded", justify="right")
    table.add_column("failed", justify="right")
    table.add_row(str(len(summary.retained)), str(len(summary.excluded)), str(len(summary.failed)))
    console.print(table)


def cmd_synchrony(args, config: RunConfig):
    """Extract one feature row per processed session."""
    if args.theta is not None:
        config = config.with_overrides(theta_seconds=args.theta)
    target = run_synchrony(Path(args.out), args.method, config, emit_paths=args.emit_paths, jobs=config.jobs)
    console.print(f"Features written to {target}")


def _print_cv(title: str, rows) -> None:
    table = Table(title=title)
    for column in ("run", "class 0", "class 1", "overall"):
        table.add_column(column, justify="right" if column != "run" else "left")
    for name, c0, c1, overall in rows:
        table.add_row(name, f"{c0:.1%}", f"{c1:.1%}", f"{overall:.1%}")
    console.print(table)


def cmd_train(args, config: RunConfig):
    """Repeated cross-validation of the elastic net (or forest) on a feature file."""
    config = config.with_overrides(lam=args.lam, alpha=args.alpha, folds=args.folds, min_repeats=args.min_visits)
    report = run_train(
        _features_path(args),
        Path(args.run_dir) if args.run_dir else None,
        config,
        model=args.model,
    )
    _print_cv("Cross-validation", [(report.method or "-", report.class0_acc, report.class1_acc, report.overall_accuracy)])


def cmd_grid(args, config: RunConfig):
    lambdas = args.lambdas or default_lambda_grid().tolist()
    alphas = args.alphas or default_alpha_grid().tolist()
    result = run_grid(_features_path(args), Path(args.out), config, lambdas, alphas, jobs=config.jobs)
    console.print(
        f"Best lambda={result.best_lambda:.4g} alpha={result.best_alpha:.4g} "
        f"accuracy={result.best_accuracy:.1%} over {len(result.surface)} grid points"
    )


def cmd_control(args, config: RunConfig):
    """Write shuffled-pair or shuffled-time copies of the processed sessions."""
    manifest = run_control(
        Path(args.out),
        args.mode,
        config,
        dest=Path(args.dest) if args.dest else None,
        interval_seconds=args.interval,
        scope=args.scope,
    )
    console.print(f"Control sessions written to {manifest.parent}")


def cmd_synth(args, config: RunConfig):
    """Generate synthetic dyads with known coupling."""
    manifest = run_synth(Path(args.out), config)
    console.print(f"Synthetic manifest written to {manifest}")


def cmd_report(args, config: RunConfig):
    """Collate cv_report.json files into one comparison table."""
    out = Path(args.out)
    reports = [Path(p) for p in args.reports] if args.reports else discover_reports(out)
    if not reports:
        raise TrustSyncError(f"no cv_report.json found under {out / 'train'}")
    table = run_report(reports, out, manifest=Path(args.manifest) if args.manifest else None)
    _print_cv(
        "Report",
        [
            (f"{r.model_name} [{r.model}]", r.class0_acc, r.class1_acc, r.overall_acc)
            for r in table.itertuples(index=False)
        ],
    )


def cmd_sweep(args, config: RunConfig):
    """Band-width sensitivity of the WP-DDTW model."""
    table = run_sweep(Path(args.out), config, args.thetas or list(DEFAULT_THETAS), jobs=config.jobs)
    _print_cv(
        "Theta sweep",
        [(f"{r.theta_seconds:g} s", r.class0_acc, r.class1_acc, r.overall_acc) for r in table.itertuples(index=False)],
    )


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synchrony": cmd_synchrony,
    "train": cmd_train,
    "grid": cmd_grid,
    "control": cmd_control,
    "synth": cmd_synth,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trustsync",
        description="Interactional synchrony features and trust prediction for dyadic AU recordings",
    )
    parser.add_argument("--config", help="Config file (flat key = value, or .yaml)")
    parser.add_argument("--out", default="out", help="Output directory (default out)")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--jobs", type=int, help="Worker processes")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # preprocess
    pre = subparsers.add_parser("preprocess", help="Quality gate, smoothing, imputation, matching pursuit")
    pre.add_argument("manifest", help="Session manifest CSV")
    pre.add_argument("--impute", action="store_true", help="Impute low-confidence stretches")

    # synchrony
    syn = subparsers.add_parser("synchrony", help="Compute per-session features")
    syn.add_argument("--method", choices=FEATURE_METHODS, default="wp_ddtw")
    syn.add_argument("--theta", type=float, help="Band width in seconds")
    syn.add_argument("--emit-paths", action="store_true", help="Write warping-path CSVs")

    # train
    train = subparsers.add_parser("train", help="Repeated cross-validation")
    train.add_argument("--method", choices=FEATURE_METHODS, default="wp_ddtw")
    train.add_argument("--features", help="Feature CSV (default <out>/features_<method>.csv)")
    train.add_argument("--lambda", dest="lam", type=float)
    train.add_argument("--alpha", type=float)
    train.add_argument("--folds", type=int)
    train.add_argument("--min-visits", type=int)
    train.add_argument("--model", choices=["enet", "rf"], default="enet")
    train.add_argument("--run-dir", help="Where to write the run (default <out>/train/<method>_<model>)")

    # grid
    grid = subparsers.add_parser("grid", help="Grid search over lambda and alpha")
    grid.add_argument("--method", choices=FEATURE_METHODS, default="wp_ddtw")
    grid.add_argument("--features")
    grid.add_argument("--lambdas", type=_floats, help="Comma-separated lambda values")
    grid.add_argument("--alphas", type=_floats, help="Comma-separated alpha values")

    # control
    ctl = subparsers.add_parser("control", help="Shuffle controls")
    ctl.add_argument("--mode", choices=["pairs", "time"], required=True)
    ctl.add_argument("--interval", type=float, help="Block length in seconds (time mode)")
    ctl.add_argument("--scope", choices=["both", "t"], default="both")
    ctl.add_argument("--dest", help="Destination run directory (default <out>/control_<mode>)")

    # synth
    subparsers.add_parser("synth", help="Generate synthetic sessions")

    # report
    rep = subparsers.add_parser("report", help="Collate cross-validation reports")
    rep.add_argument("reports", nargs="*", help="cv_report.json files or run directories")
    rep.add_argument("--manifest", help="Manifest for the trust-amount distribution")

    # sweep
    swp = subparsers.add_parser("sweep", help="Band-width sensitivity sweep")
    swp.add_argument("--thetas", type=_floats, help="Comma-separated band widths in seconds")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0

    out = Path(args.out)
    level = getattr(logging, os.environ.get("TRUSTSYNC_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    reset_logging()
    setup_logging(level, log_file=out / "trustsync.log")
    RunConfig.reset_instance()
    try:
        config = _load_config(args)
        COMMANDS[args.command](args, config)
    except (TrustSyncError, ValidationError, ValueError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"Error: {exc}", file=sys.stderr)
        return 1
    finally:
        reset_logging()
    return 0


if __name__ == "__main__":
    sys.exit(main())
