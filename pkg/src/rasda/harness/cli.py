"""Command-line entry point: ``rasda {ladder,run,replay,gns-demo,compare}``.

Exit codes: 0 success, 1 backend failure, 2 bad arguments or config,
3 event-log invariant violated.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from rasda.core import InvalidLadder, compute_ladder
from rasda.harness.config import PRESETS, ConfigError, load_config
from rasda.harness.replay import replay_file
from rasda.harness.report import join_summaries, read_summary_csv
from rasda.harness.runner import BackendFailure, run_experiment
from rasda.toy import ToyProblemConfig, ToyTrainer, ZeroGradient, estimate_gns, make_problem

logger = logging.getLogger("rasda")

EXIT_OK = 0
EXIT_BACKEND = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"seeds must be integers, got {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"seeds must be non-negative integers, got {text!r}")
    return seeds


def cmd_ladder(args) -> int:
    try:
        ladder = compute_ladder(args.min, args.max, args.sf, args.rf)
    except InvalidLadder as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for m in ladder.milestones:
        print(m)
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        seeds = None
        if args.seed:
            seeds = args.seed
        elif os.environ.get("RASDA_SEED"):
            seeds = _parse_seeds(os.environ["RASDA_SEED"])
        if seeds is not None:
            cfg = cfg.with_seeds(seeds)
        if args.policy:
            cfg = cfg.replace(policy=args.policy)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get("RASDA_OUT") or os.path.join("runs", cfg.name)
    try:
        result = run_experiment(cfg, out, jobs=args.jobs)
    except BackendFailure as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except OSError as exc:
        print(f"cannot write outputs to {out}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    report = result.report
    for s in sorted(result.summaries, key=lambda s: (s.policy, s.seed)):
        print(f"{s.policy:5s} seed={s.seed} makespan={s.makespan_s:.1f}s best={s.best_metric:.6g}")
    if {"asha", "rasda"} <= set(report.policies):
        print(f"speed-up (mean ASHA / mean RASDA makespan): {report.speed_up:.3f}x")
    print(f"wrote {len(result.files)} files to {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    status = EXIT_OK
    for path in args.logs:
        try:
            verdict = replay_file(path)
        except OSError as exc:
            print(f"{path}: cannot read: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{path}: {verdict}")
        if not verdict.ok:
            status = EXIT_INVARIANT
    return status


def cmd_gns_demo(args) -> int:
    try:
        problem = make_problem(ToyProblemConfig(kind=args.kind), args.seed)
        trainer = ToyTrainer(
            {"lr": args.lr, "optimizer": args.optimizer},
            problem,
            workers=args.workers,
            local_batch_size=args.local_batch_size,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("epoch,train_loss,trace_sigma,grad_norm_sq,gns")
    loss = float("nan")
    for epoch in range(args.epochs + 1):
        if epoch > 0:
            loss = trainer.run_epoch()
        try:
            est = estimate_gns(trainer.state.w, problem.train, args.probe_size, seed=epoch)
            print(f"{epoch},{loss!r},{est.trace_sigma!r},{est.grad_norm_sq!r},{est.gns!r}")
        except ZeroGradient:
            print(f"{epoch},{loss!r},,0.0,")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        left = read_summary_csv(Path(args.left).read_text(encoding="utf-8"))
        right = read_summary_csv(Path(args.right).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerows(join_summaries(left, right))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rasda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ladder", help="print rung milestones, one per line")
    q.add_argument("--min", type=int, required=True, help="first milestone (min_t)")
    q.add_argument("--max", type=int, required=True, help="training budget (max_t)")
    q.add_argument("--sf", type=int, default=2, help="scaling factor")
    q.add_argument("--rf", type=int, default=2, help="reduction factor")
    q.set_defaults(func=cmd_ladder)

    q = sub.add_parser("run", help="run every (policy, seed) cell of an experiment")
    q.add_argument("config", help=f"config file (TOML or JSON) or preset: {', '.join(PRESETS)}")
    q.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
    q.add_argument("--out", help="output directory (default runs/<name>)")
    q.add_argument("--policy", choices=("asha", "rasda", "both"), help="override the policy")
    q.add_argument("--jobs", type=int, default=1, help="parallel cells")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("replay", help="re-validate event logs")
    q.add_argument("logs", nargs="+")
    q.set_defaults(func=cmd_replay)

    q = sub.add_parser("gns-demo", help="train the toy problem and print per-epoch GNS")
    q.add_argument("--epochs", type=int, default=20)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--local-batch-size", type=int, default=32)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    q.add_argument("--kind", choices=("linear", "quadratic"), default="linear")
    q.add_argument("--probe-size", type=int, default=256)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_gns_demo)

    q = sub.add_parser("compare", help="join two summary.csv files on (policy, seed)")
    q.add_argument("left")
    q.add_argument("right")
    q.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
