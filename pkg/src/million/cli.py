"""``million`` command line: train, eval, ablate, plot."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

from .config import VARIANTS, ConfigError, RunConfig, load_config, parse_config
from .learner import TrainingDiverged
from .plot import CsvFormatError, plot_metrics
from .tensor import CheckpointError, load_checkpoint

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def _override(cfg: RunConfig, args) -> RunConfig:
    run = cfg.run
    if getattr(args, "seed", None) is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        run = dataclasses.replace(run, workers=args.workers)
    learner = dataclasses.replace(cfg.learner, workers=run.workers)
    cfg = dataclasses.replace(cfg, run=run, learner=learner)
    variant = getattr(args, "variant", None)
    if variant:
        cfg = cfg.with_variant(variant)
    return cfg


def cmd_train(args) -> int:
    from .runner import train

    cfg = _override(load_config(args.config), args)
    out = args.out or os.path.join("runs", f"{cfg.run.variant}-seed{cfg.run.seed}")
    print(f"training {cfg.run.variant} (seed {cfg.run.seed}) -> {out}")
    train(cfg, out, resume=args.checkpoint)
    return 0


def cmd_ablate(args) -> int:
    from .runner import train

    base = load_config(args.config)
    seeds = args.seeds or [base.run.seed if args.seed is None else args.seed]
    root = args.out or "runs"
    for seed in seeds:
        args.seed = seed
        cfg = _override(base, args)
        out = os.path.join(root, cfg.run.variant, f"seed{seed}")
        print(f"ablation {cfg.run.variant} (seed {seed}) -> {out}")
        train(cfg, out)
    return 0


def cmd_eval(args) -> int:
    from .runner import build, file_digest, restore_checkpoint, run_eval

    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    before = file_digest(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif "config" in ckpt.meta:
        cfg = parse_config(ckpt.meta["config"])
    else:
        raise UsageError("checkpoint carries no config; pass --config")
    cfg = _override(cfg, args)
    comp = build(cfg)
    restore_checkpoint(comp, ckpt, training_state=False)
    if args.tasks:
        tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    else:
        tasks = {"train": comp.train_tasks, "test": comp.test_tasks, "all": comp.all_tasks}[args.split]
    unknown = [t for t in tasks if t not in comp.all_tasks]
    if unknown:
        raise UsageError(f"task(s) not in checkpoint manifest: {', '.join(unknown)}")
    if not tasks:
        raise UsageError(f"split {args.split!r} has no tasks")
    modes = [True] if args.deterministic else [False, True]
    seed = cfg.run.seed if args.seed is None else args.seed
    rows = []
    for det in modes:
        table = run_eval(comp, args.episodes, seed=seed, deterministic=det, tasks=tasks)
        for task, res in table.items():
            rows.append({"task": task, "mode": "deterministic" if det else "stochastic",
                         "split": "train" if task in comp.train_tasks else "test", "episodes": args.episodes,
                         **res})
    width = max(len(r["task"]) for r in rows)
    print(f"{'task':<{width}}  {'mode':<13}  trial_success  episode_solved  return")
    for r in rows:
        print(f"{r['task']:<{width}}  {r['mode']:<13}  {r['trial_success']:13.3f}  {r['episode_solved']:14.3f}  "
              f"{r['return']:.1f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    if file_digest(args.checkpoint) != before:
        raise RuntimeError("checkpoint changed during evaluation")
    return 0


def cmd_plot(args) -> int:
    columns = [c.strip() for c in args.columns.split(",")] if args.columns else None
    svg = plot_metrics(args.metrics, columns=columns, title=args.title or "")
    out = args.out or "curves.svg"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="million", description="Instruction-conditioned meta-RL on a desk suite.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", default="builtin:desk.ini", help="run config file (default: builtin:desk.ini)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--workers", type=int, help="rollout worker threads")
        p.add_argument("--out", help="output directory")
        if variant:
            p.add_argument("--variant", choices=VARIANTS, help="ablation variant")

    p = sub.add_parser("train", help="train an agent")
    common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train one ablation variant")
    common(p, variant=False)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="train one run per seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="per-task success rates of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run config (default: the one stored in the checkpoint)")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--tasks", help="comma separated task names (overrides --split)")
    p.add_argument("--deterministic", action="store_true", help="only mean-action evaluation")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render metrics CSVs as an SVG")
    p.add_argument("metrics", nargs="+", help="metrics.csv files (one per seed)")
    p.add_argument("--out", help="SVG path (default curves.svg)")
    p.add_argument("--columns", help="comma separated columns (default: eval or success columns)")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"million: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CsvFormatError, CheckpointError, KeyError, FileNotFoundError) as exc:
        print(f"million: error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"million: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
