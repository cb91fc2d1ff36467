"""Command-line entry point: ``alrao {train,grid,sweep,frozen,convex-check}``.

Exit status is 0 whenever the experiment ran to completion, including runs
that diverged (recorded as failed) and convex checks whose hypothesis is not
met. Bad configuration or I/O problems exit with 2.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config
from .harness import (DEFAULT_SGD_GRID, emit_csv, prepare_data, run_frozen, run_grid, run_interval_sweep,
                      run_train)

OVERRIDES = (
    # flag, config field, type
    ("--eta-min", "eta_min", float),
    ("--eta-max", "eta_max", float),
    ("--n-classifiers", "n_cl", int),
    ("--lr", "lr", float),
    ("--optimizer", "optimizer", str),
    ("--seed", "seed", int),
    ("--epochs", "max_epochs", int),
    ("--batch-size", "batch_size", int),
    ("--patience", "patience", int),
    ("--dataset", "dataset", str),
    ("--out", "out_dir", str),
)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="alrao", description="Random per-feature learning rates: experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "grid", "sweep", "frozen", "convex-check"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        for flag, dest, typ in OVERRIDES:
            p.add_argument(flag, dest=dest, type=typ)
        if name == "grid":
            p.add_argument("--lrs", type=_floats, default=list(DEFAULT_SGD_GRID))
        if name == "sweep":
            p.add_argument("--eta-grid", type=_floats, default=list(np.logspace(-5, 1, 5)))
        if name == "frozen":
            p.add_argument("--ps", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    return ap


def _config(args):
    overrides = {dest: getattr(args, dest) for _, dest, _ in OVERRIDES}
    return load_config(args.config, **overrides)


def _report(lines):
    for line in lines:
        print(line)


def cmd_train(cfg):
    lg = run_train(cfg, prepare_data(cfg))
    if cfg.out_dir:
        emit_csv(lg, cfg.out_dir)
    _report([f"run_id = {lg.run_id}", f"status = {lg.status}", f"best_epoch = {lg.best_epoch}",
             f"best_val_loss = {lg.best_val_loss!r}", f"test_loss = {lg.test_loss!r}",
             f"test_top1 = {lg.test_top1!r}"])


def cmd_grid(cfg, lrs):
    res = run_grid(cfg, lrs, out_dir=cfg.out_dir)
    for lr, lg in res.logs.items():
        print(f"lr = {lr!r}  status = {lg.status}  best_val_loss = {lg.best_val_loss!r}  "
              f"test_top1 = {lg.test_top1!r}")
    print("best_lr = " + ("none (all runs failed)" if res.all_failed else repr(res.best_lr)))


def cmd_sweep(cfg, eta_grid):
    res = run_interval_sweep(cfg, sorted(eta_grid), out_dir=cfg.out_dir)
    n = len(res.eta_grid)
    print("eta_min \\ eta_max  " + "  ".join(f"{e:.3g}" for e in res.eta_grid))
    for i in range(n):
        cells = ["-" if j < i else f"{res.loss[i, j]:.4f}" for j in range(n)]
        print(f"{res.eta_grid[i]:.3g}  " + "  ".join(cells))


def cmd_frozen(cfg, ps):
    if cfg.lr is None:
        cfg = cfg.replace(lr=0.1)
    logs = run_frozen(cfg, ps, out_dir=cfg.out_dir)
    for p, lg in logs.items():
        print(f"p = {p!r}  status = {lg.status}  test_top1 = {lg.test_top1!r}")


def cmd_convex(cfg):
    from .convex import run_convex_check

    report = run_convex_check(cfg)
    _report(report.lines())
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "convex.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(report.lines()) + "\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "grid":
            cmd_grid(cfg, args.lrs)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.eta_grid)
        elif args.command == "frozen":
            cmd_frozen(cfg, args.ps)
        else:
            cmd_convex(cfg)
    except (ConfigError, OSError) as e:
        print(f"alrao: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
