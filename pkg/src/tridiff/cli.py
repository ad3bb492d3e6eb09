"""Command line entry points: run, sweep, train, report.

The output root comes from --out when given, else the TRIDIFF_OUT
environment variable, else ./tridiff-out. run and sweep exit nonzero when
any check declared in the config fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .datasets import generate_dataset, signal_shape_for
from .harness import (ablation_sweep, resolve_config, run_experiment, summarize_rows,
                      write_report, SWEEP_AXES)
from .models import ScoreMLP
from .schedule import make_schedule

OUTPUT_ENV = "TRIDIFF_OUT"


def _out_root(args) -> Path:
    root = args.out or os.environ.get(OUTPUT_ENV) or "tridiff-out"
    return Path(root)


def _load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _print_summary(summary) -> None:
    if not summary:
        print("no successful runs")
        return
    header = f"{'label':32s} {'runs':>4s} {'psnr':>14s} {'ssim':>14s} {'residual':>12s} {'time/s':>8s}"
    print(header)
    print("-" * len(header))
    for row in summary:
        ssim = "-" if np.isnan(row["ssim_mean"]) else f"{row['ssim_mean']:.3f}±{row['ssim_std']:.3f}"
        print(f"{row['label']:32s} {row['runs']:4d} "
              f"{row['psnr_mean']:7.2f}±{row['psnr_std']:5.2f} {ssim:>14s} "
              f"{row['residual_mean']:12.4g} {row['runtime_mean']:8.2f}")


def _finish(output) -> int:
    _print_summary(summarize_rows(output.rows))
    for chk, ok, detail in output.check_results:
        print(f"[{'PASS' if ok else 'FAIL'}] {chk['type']}: {detail}")
    print(f"results: {output.results_path}")
    return 0 if output.all_checks_passed else 1


def cmd_run(args) -> int:
    output = run_experiment(_load_config(args.config), _out_root(args))
    return _finish(output)


def cmd_sweep(args) -> int:
    output = ablation_sweep(_load_config(args.config), args.axis, _out_root(args))
    return _finish(output)


def cmd_train(args) -> int:
    cfg = resolve_config(_load_config(args.config))
    if cfg["model"]["kind"] != "mlp":
        print("train: config.model.kind must be 'mlp'", file=sys.stderr)
        return 2
    sched = make_schedule(cfg["schedule"]["T"], cfg["schedule"]["beta_min"],
                          cfg["schedule"]["beta_max"])
    shape = signal_shape_for(cfg["dataset"]["kind"])
    spec = cfg["model"]
    model = ScoreMLP(schedule=sched, dim=int(np.prod(shape)), hidden=spec["hidden"],
                     depth=spec["depth"], time_freqs=spec["time_freqs"], iters=spec["iters"],
                     batch_size=spec["batch_size"], lr=spec["lr"], seed=spec["seed"])
    data = generate_dataset(cfg["dataset"]["kind"], cfg["dataset"]["train_size"],
                            seed=cfg["dataset"]["seed"], params=cfg["dataset"]["params"])
    model.fit(data)
    out_dir = _out_root(args) / cfg["name"]
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    model.save(ckpt)
    with open(out_dir / "train_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, loss in enumerate(model.loss_curve_):
            writer.writerow([i, repr(float(loss))])
    print(f"checkpoint: {ckpt}")
    print(f"final loss: {model.loss_curve_[-1]:.5f}" if len(model.loss_curve_) else "no iterations")
    return 0


def cmd_report(args) -> int:
    summary = write_report(args.results, args.summary_out)
    _print_summary(summary)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tridiff",
                                     description="Diffusion-sampler inverse problem bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every sampler in a config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help=f"output root (default ${OUTPUT_ENV})")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid sweep along one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_train = sub.add_parser("train", help="train the model of a config, save a checkpoint")
    p_train.add_argument("config")
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_report = sub.add_parser("report", help="summarize an existing results.csv")
    p_report.add_argument("results")
    p_report.add_argument("--summary-out", default=None)
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
