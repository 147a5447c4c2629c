#!/usr/bin/env python3
"""
Command-line entry point for ADROIT experiments

    python run.py run --config configs/desk_synthetic.env --strategy adroit --strategy random
    python run.py select --config configs/desk_synthetic.env --seed 0 --strategy adroit
    python run.py eval --config configs/desk_synthetic.env --seed 0 --strategy adroit --round 3
    python run.py plot-data --out runs/desk --strategy adroit --strategy random --relative-to random
    python run.py gen-data --output data/synthetic.bin --num-classes 4 --per-class 625 --side 16
    python run.py runs

Exit codes: 0 success, 2 configuration or argument error, 3 training divergence,
1 any other failure.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
import torch

from config import Config
from adroit.acquire import STRATEGIES, acquire
from adroit.core import AdroitError, ConfigError, DivergenceError, InvalidArgumentError, Rng
from adroit.data import make_synthetic, write_binary_records
from adroit.harness import (
    SELECTION_COLUMNS, ExperimentSpec, RunArtifacts, aggregate, collect_records, emit_plot_data,
    evaluate_accuracy, prepare_data,
)
from adroit.logger import get_logger, init_debug_logging, init_logging
from adroit.run_tracker import get_run_tracker

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _strategies(values: Optional[List[str]]) -> List[str]:
    names = []
    for value in values or []:
        names.extend(p.strip() for p in value.split(",") if p.strip())
    return names


def _load_spec(args, strategy: Optional[str] = None) -> ExperimentSpec:
    spec = ExperimentSpec.from_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        overrides["run_dir"] = args.out
    if strategy:
        overrides["strategy"] = strategy
    return spec.with_overrides(**overrides) if overrides else spec


def _single_strategy(args, spec: ExperimentSpec) -> str:
    names = _strategies(args.strategy)
    if len(names) > 1:
        raise InvalidArgumentError("this command takes a single --strategy")
    return names[0] if names else spec.strategy


def _seed_of(spec: ExperimentSpec) -> int:
    if len(spec.seeds) != 1:
        raise InvalidArgumentError("this command needs exactly one seed (use --seed)")
    return spec.seeds[0]


# ========================
# Subcommands
# ========================

def cmd_run(args) -> int:
    from workflow import ExperimentWorkflow

    base = _load_spec(args)
    strategies = _strategies(args.strategy) or [base.strategy]
    tracker = get_run_tracker() if Config.ENABLE_RUN_TRACKING else None
    workflow = ExperimentWorkflow()
    for strategy in strategies:
        spec = base.with_overrides(strategy=strategy)
        result = workflow.run(spec, tracker)
        print(result["summary"].to_string(index=False))
    return EXIT_OK


def cmd_select(args) -> int:
    spec = _load_spec(args)
    spec = spec.with_overrides(strategy=_single_strategy(args, spec))
    seed = _seed_of(spec)
    train, _ = prepare_data(spec)
    artifacts = RunArtifacts(spec.run_dir, spec.strategy, seed)
    round_index = artifacts.last_round(with_bundle=spec.strategy == "adroit") if args.round is None else args.round
    pool, target, bundle = artifacts.load_round(spec, train, round_index)

    rng = Rng(seed, spec.strategy).child(f"round{round_index}").child("acquire")
    budget = args.budget if args.budget is not None else spec.al.budget
    selected, scores = acquire(spec.strategy, train, pool, budget, rng, target=target, bundle=bundle,
                               batch_size=spec.al.eval_batch_size)
    frame = pd.DataFrame({"index": selected, "score": scores, "strategy": spec.strategy, "round": round_index},
                         columns=SELECTION_COLUMNS)
    frame.to_csv(args.output or sys.stdout, index=False, float_format=Config.FLOAT_FORMAT)
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    spec = spec.with_overrides(strategy=_single_strategy(args, spec))
    seed = _seed_of(spec)
    train, holdout = prepare_data(spec)
    artifacts = RunArtifacts(spec.run_dir, spec.strategy, seed)
    round_index = artifacts.last_round() if args.round is None else args.round
    _, target, _ = artifacts.load_round(spec, train, round_index)
    accuracy = evaluate_accuracy(target, holdout, batch_size=spec.al.eval_batch_size)
    print(f"{spec.strategy} seed {seed} round {round_index}: accuracy {accuracy:.17g}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    strategies = _strategies(args.strategy)
    if not strategies:
        raise InvalidArgumentError("plot-data needs at least one --strategy")
    reference = collect_records(args.out, args.relative_to) if args.relative_to else None
    frames = [aggregate(collect_records(args.out, s), s, reference) for s in strategies]
    emit_plot_data(frames, args.output or Path(args.out) / "plot_data.csv")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    dataset = make_synthetic(args.num_classes, args.per_class, args.side, Rng(args.seed, "data").child("synthetic"),
                             noise=args.noise)
    write_binary_records(dataset, args.output)
    print(f"wrote {len(dataset)} records to {args.output}")
    return EXIT_OK


def cmd_runs(args) -> int:
    runs = get_run_tracker().list_runs(strategy=args.strategy, limit=args.limit)
    if not runs:
        print("no runs recorded")
        return EXIT_OK
    columns = ["run_id", "strategy", "seed", "status", "rounds_completed", "final_accuracy", "created_at"]
    print(pd.DataFrame(runs)[columns].to_string(index=False))
    return EXIT_OK


# ========================
# Parser
# ========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adroit", description=Config.APP_DESCRIPTION)
    parser.add_argument("--debug", action="store_true", help="verbose console logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_args(p, multi_strategy=False):
        p.add_argument("--config", required=True, help="flat key=value experiment file")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="run directory root (overrides run_dir)")
        p.add_argument("--strategy", action="append",
                       help=f"one of {', '.join(STRATEGIES)}" + ("; repeat or comma-separate" if multi_strategy else ""))

    p = sub.add_parser("run", help="full AL experiment from a config file")
    experiment_args(p, multi_strategy=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("select", help="one acquisition step from a saved round")
    experiment_args(p)
    p.add_argument("--round", type=int, help="saved round (default: latest)")
    p.add_argument("--budget", type=int, help="number of samples (default: config budget)")
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="holdout accuracy of a saved target learner")
    experiment_args(p)
    p.add_argument("--round", type=int, help="saved round (default: latest)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-data", help="aggregate seeds and write accuracy-vs-labels CSV")
    p.add_argument("--out", required=True, help="run directory root")
    p.add_argument("--strategy", action="append", help="strategies to aggregate; repeat or comma-separate")
    p.add_argument("--relative-to", help="reference strategy for mean_delta/std_delta")
    p.add_argument("--output", help="CSV path (default: <out>/plot_data.csv)")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as binary records")
    p.add_argument("--output", required=True)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=625)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("runs", help="list runs recorded in the tracker")
    p.add_argument("--strategy")
    p.add_argument("--limit", type=int, default=50)
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        Config.validate_config()
    except ValueError as e:
        init_logging(log_dir=Config.LOG_DIR)
        logger.error(f"❌ Invalid application settings: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    rotation = {"max_bytes": Config.LOG_MAX_BYTES, "backup_count": Config.LOG_BACKUP_COUNT}
    if args.debug or Config.DEBUG_MODE:
        init_debug_logging(log_dir=Config.LOG_DIR, **rotation)
    else:
        init_logging(log_dir=Config.LOG_DIR, log_level=Config.LOG_LEVEL, **rotation)
    torch.set_num_threads(Config.NUM_THREADS)
    torch.use_deterministic_algorithms(True)

    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as e:
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error(f"❌ Training diverged: {e}")
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (AdroitError, OSError) as e:
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
