"""Command-line entry point: ``fedtrust <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, default_config, load_config, parse_seeds
from .experiments import (
    accuracy_grid, build_data, make_env, materialize, new_ledger, publisher_schedule,
    reputation_trace, sub_seed, threshold_sweep, with_overrides, write_results,
)
from .ledger import ChainFormatError, first_bad_block, read_chain
from .orchestrator import NoEligibleWorkers, SchemeState, Scheme, TaskReport, TaskSpec, run_task

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_IO = 3

logger = logging.getLogger("fedtrust")


def _setup_logging() -> None:
    level = os.environ.get("FEDTRUST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else default_config()
    try:
        seeds = parse_seeds(args.seeds) if args.seeds else None
    except ValueError as exc:
        raise ConfigError(str(exc), "--seeds") from None
    try:
        scheme = Scheme.parse(args.scheme) if args.scheme else None
    except ValueError as exc:
        raise ConfigError(str(exc), "--scheme") from None
    return with_overrides(cfg, seeds=seeds, scheme=scheme, out=args.out)


def _experiment(fn):
    def run(args) -> int:
        cfg = _load(args)
        rows = fn(cfg)
        out, summary = write_results(rows, cfg.out)
        print(f"wrote {len(rows)} rows to {out} (summary: {summary})")
        return EXIT_OK
    return run


def cmd_verify(args) -> int:
    try:
        chain, keys = read_chain(args.chain)
    except OSError as exc:
        print(f"error: cannot read {args.chain}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ChainFormatError as exc:
        if exc.line is not None and exc.line >= 2:
            print(f"INVALID: block {exc.line - 2} is malformed (line {exc.line}): {exc}")
        else:
            print(f"INVALID: chain header is malformed: {exc}")
        return EXIT_INVALID
    bad = first_bad_block(chain, keys)
    if bad is not None:
        print(f"INVALID: first bad block at height {bad} of {len(chain)}")
        return EXIT_INVALID
    print(f"OK: {len(chain)} blocks verified")
    return EXIT_OK


def cmd_run_task(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds[0]
    data = build_data(cfg, seed)
    roster = materialize(cfg.roster.profiles(), data.pool, seed, cfg.dataset.shard_size)
    order, weights = publisher_schedule(cfg, seed, args.tasks)
    env = make_env(cfg, data, weights)
    ledger = new_ledger(cfg, seed) if cfg.scheme in (Scheme.MSL, Scheme.TSL) else None
    state = SchemeState()
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TaskReport.REPORT_HEADER)
        for k in range(1, args.tasks + 1):
            publisher = order[k - 1] if args.publisher is None else args.publisher
            spec = TaskSpec(f"task-{k}", publisher, reputation_threshold=cfg.reputation.threshold,
                            rounds=cfg.rounds, scheme=cfg.scheme)
            try:
                report = run_task(spec, roster, ledger, state, sub_seed(seed, "task", k), env)
            except NoEligibleWorkers as exc:
                logger.warning("%s", exc)
                print(f"task {k}: no eligible workers", file=sys.stderr)
                continue
            w.writerows(report.rows())
            print(f"task {k} ({publisher}): selected {len(report.selected)}, "
                  f"accuracy {report.final_accuracy:.4f}")
    if args.chain and ledger is not None:
        ledger.export(args.chain)
        print(f"chain exported to {args.chain}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtrust",
                                     description="Reputation-based worker selection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="scenario INI file (defaults if omitted)")
        p.add_argument("--out", metavar="PATH", help="output CSV path (overrides the config)")
        p.add_argument("--seeds", metavar="LIST", help="seed list such as 0-19 or 1,4,7")
        p.add_argument("--scheme", metavar="NAME", help="MSL, TSL, ATV or NoDefense")

    for name, fn, help_ in (
        ("accuracy-grid", accuracy_grid, "accuracy without defenses over the attack grid"),
        ("reputation-trace", reputation_trace, "per-task reputation of a worker turning bad"),
        ("threshold-sweep", threshold_sweep, "accuracy against the selection threshold"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.set_defaults(func=_experiment(fn))

    p = sub.add_parser("run-task", help="run tasks with one scheme and write the task reports")
    common(p)
    p.add_argument("--tasks", type=int, default=1, help="number of consecutive tasks")
    p.add_argument("--publisher", help="publisher of every task (default: the weekly schedule)")
    p.add_argument("--chain", metavar="PATH", help="export the ledger here afterwards")
    p.set_defaults(func=cmd_run_task)

    p = sub.add_parser("verify", help="verify an exported chain file")
    p.add_argument("chain", metavar="CHAIN", help="chain file written by run-task --chain")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
