"""Experiment configuration, execution, sweeps, and tabular output.

A single JSON document describes an experiment: dataset, schedule, model,
operator, noise, a list of sampler specs, repetitions, and optional
sweep/check sections. Unknown keys anywhere in the document are errors.
Every random choice is derived from seeds in the resolved config, so a
given config fingerprint reruns to identical results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import clone

from .datasets import DATASET_KINDS, default_gmm_params, generate_dataset, signal_shape_for
from .fileio import write_pgm
from .metrics import MetricReport, psnr, residual_norm, ssim
from .models import GMMScoreOracle, ScoreMLP, load_gmm_prior
from .operators import ProblemInstance, operator_from_config, synthesize_measurements
from .samplers import SAMPLER_VARIANTS, RunResult, make_sampler
from .schedule import make_schedule

__all__ = [
    "resolve_config",
    "config_fingerprint",
    "run_experiment",
    "ablation_sweep",
    "best_of_k",
    "summarize_rows",
    "read_results_csv",
    "write_report",
    "ExperimentOutput",
]

RESULT_COLUMNS = [
    "fingerprint", "label", "variant", "n_steps", "n_inner", "lam", "delta",
    "seed", "psnr", "ssim", "residual", "runtime", "iterations", "error",
]

SWEEP_AXES = ("n-k", "lambda", "delta")


def derive_seed(*parts) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def _strict(section: dict, allowed: dict, where: str) -> dict:
    """Fill defaults and reject unknown keys. allowed maps key -> default."""
    if not isinstance(section, dict):
        raise ValueError(f"{where}: expected an object, got {type(section).__name__}")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)} (valid: {sorted(allowed)})")
    out = dict(allowed)
    out.update(section)
    missing = [k for k, v in out.items() if v is _REQUIRED]
    if missing:
        raise ValueError(f"{where}: missing required keys {sorted(missing)}")
    return out


class _Required:
    def __repr__(self):
        return "<required>"


_REQUIRED = _Required()

_SAMPLER_DEFAULTS = {
    "variant": _REQUIRED,
    "label": None,
    "n_steps": 20,
    "n_inner": 30,
    "lam": 0.0,
    "delta": "auto",
    "gamma": 0.01,
    "optimizer": "adam",
    "forward_map": "resample",
    "n_ode": 5,
    "zeta0": 1.0,
    "zeta_schedule": "residual",
}


def resolve_config(raw: dict) -> dict:
    """Validate a config document and fill in all defaults."""
    top = _strict(raw, {
        "name": "experiment",
        "seed": 0,
        "dataset": _REQUIRED,
        "schedule": {},
        "model": _REQUIRED,
        "operator": _REQUIRED,
        "noise": {},
        "samplers": _REQUIRED,
        "repetitions": 1,
        "best_of": None,
        "sweep": None,
        "workers": 1,
        "images": 0,
        "checks": [],
    }, "config")

    top["dataset"] = _strict(top["dataset"], {
        "kind": _REQUIRED, "train_size": 512, "seed": 1, "params": None,
    }, "config.dataset")
    if top["dataset"]["kind"] not in DATASET_KINDS:
        raise ValueError(f"config.dataset.kind must be one of {DATASET_KINDS}")

    top["schedule"] = _strict(top["schedule"], {
        "T": 1000, "beta_min": 1e-4, "beta_max": 0.02,
    }, "config.schedule")

    model = dict(top["model"])
    kind = model.get("kind")
    if kind == "mlp":
        top["model"] = _strict(model, {
            "kind": _REQUIRED, "hidden": 128, "depth": 3, "time_freqs": 8,
            "iters": 2000, "batch_size": 64, "lr": 1e-3, "seed": 2, "checkpoint": None,
        }, "config.model")
    elif kind == "analytic-gmm":
        top["model"] = _strict(model, {
            "kind": _REQUIRED, "weights": None, "means": None, "variances": None,
            "config_path": None,
        }, "config.model")
    else:
        raise ValueError(f"config.model.kind must be 'mlp' or 'analytic-gmm', got {kind!r}")

    top["noise"] = _strict(top["noise"], {
        "model": "gaussian", "sigma_y": 0.0, "lambda_y": None,
    }, "config.noise")

    if not isinstance(top["samplers"], list):
        raise ValueError("config.samplers must be a list")
    specs = []
    for idx, spec in enumerate(top["samplers"]):
        spec = _strict(spec, _SAMPLER_DEFAULTS, f"config.samplers[{idx}]")
        if spec["variant"] not in SAMPLER_VARIANTS:
            raise ValueError(
                f"config.samplers[{idx}].variant {spec['variant']!r} unknown "
                f"(valid: {sorted(SAMPLER_VARIANTS)})"
            )
        if spec["label"] is None:
            spec["label"] = f"{spec['variant']}-N{spec['n_steps']}-K{spec['n_inner']}"
        specs.append(spec)
    labels = [s["label"] for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"config.samplers labels must be unique, got {labels}")
    top["samplers"] = specs

    if top["best_of"] is not None:
        top["best_of"] = _strict(top["best_of"], {"k": 1, "selector": "residual"},
                                 "config.best_of")
        if top["best_of"]["selector"] not in ("residual", "psnr"):
            raise ValueError("config.best_of.selector must be 'residual' or 'psnr'")

    if top["sweep"] is not None:
        top["sweep"] = _strict(top["sweep"], {
            "n_steps": [], "n_inner": [], "lam": [], "delta_multipliers": [],
            "max_cells": 64,
        }, "config.sweep")

    checks = []
    for idx, chk in enumerate(top["checks"]):
        checks.append(_strict(chk, {
            "type": _REQUIRED, "label": None, "better": None, "worse": None,
            "value": None, "min_db": None,
        }, f"config.checks[{idx}]"))
    top["checks"] = checks
    return top


def config_fingerprint(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- building blocks -------------------------------------------------------------


def _build_schedule(cfg):
    s = cfg["schedule"]
    return make_schedule(s["T"], s["beta_min"], s["beta_max"])


def _build_model(cfg, sched, shape):
    spec = cfg["model"]
    dim = int(np.prod(shape))
    if spec["kind"] == "mlp":
        if spec["checkpoint"]:
            return ScoreMLP.load(spec["checkpoint"], sched)
        model = ScoreMLP(schedule=sched, dim=dim, hidden=spec["hidden"], depth=spec["depth"],
                         time_freqs=spec["time_freqs"], iters=spec["iters"],
                         batch_size=spec["batch_size"], lr=spec["lr"], seed=spec["seed"])
        data = generate_dataset(cfg["dataset"]["kind"], cfg["dataset"]["train_size"],
                                seed=cfg["dataset"]["seed"], params=cfg["dataset"]["params"])
        model.fit(data)
        return model
    if spec["config_path"]:
        return load_gmm_prior(spec["config_path"], sched)
    params = {k: spec[k] for k in ("weights", "means", "variances")}
    if any(v is None for v in params.values()):
        params = default_gmm_params()
    return GMMScoreOracle(params["weights"], params["means"],
                          [np.asarray(v, dtype=np.float64) for v in params["variances"]],
                          sched)


def _build_problems(cfg, operator, shape):
    noise = cfg["noise"]
    reps = int(cfg["repetitions"])
    truths = generate_dataset(cfg["dataset"]["kind"], max(reps, 1),
                              seed=derive_seed(cfg["seed"], 11),
                              params=cfg["dataset"]["params"])
    problems = []
    for r in range(reps):
        x_true = truths[r].reshape(shape)
        problems.append(synthesize_measurements(
            x_true, operator, sigma_y=noise["sigma_y"], noise_model=noise["model"],
            seed=derive_seed(cfg["seed"], 13, r), lambda_y=noise["lambda_y"]))
    return problems


def _resolve_delta(delta_spec, problem: ProblemInstance) -> float:
    """Numeric delta, 'auto' (noise level plus a small margin, times sqrt(m)),
    or {'multiplier': c} for c * sigma_y * sqrt(m)."""
    if isinstance(delta_spec, (int, float)):
        return float(delta_spec)
    root_m = math.sqrt(problem.m)
    if delta_spec == "auto":
        return (problem.sigma_y + 0.001) * root_m
    if isinstance(delta_spec, dict) and set(delta_spec) == {"multiplier"}:
        return float(delta_spec["multiplier"]) * problem.sigma_y * root_m
    raise ValueError(f"bad delta spec {delta_spec!r}")


def _build_sampler(spec: dict, model, sched, problem, seed: int):
    variant = spec["variant"]
    params = {"n_steps": spec["n_steps"], "seed": seed}
    if variant in ("triple", "triple-ode", "no-backward"):
        params.update(n_inner=spec["n_inner"], delta=_resolve_delta(spec["delta"], problem),
                      gamma=spec["gamma"], optimizer=spec["optimizer"])
    if variant in ("triple", "triple-ode"):
        params.update(lam=spec["lam"], forward_map=spec["forward_map"])
    if variant == "triple-ode":
        params.update(n_ode=spec["n_ode"])
    if variant in ("dps", "dps-resample"):
        params.update(zeta0=spec["zeta0"], zeta_schedule=spec["zeta_schedule"])
    return make_sampler(variant, model, sched, **params)


def _measure(result: RunResult, problem: ProblemInstance) -> MetricReport:
    x_hat = result.x_hat
    shape = problem.operator.signal_shape
    p = s = m = float("nan")
    if problem.x_true is not None:
        p = psnr(x_hat, problem.x_true)
        m = float(np.mean((x_hat - problem.x_true) ** 2))
        if len(shape) == 2 and min(shape) >= 7:
            s = ssim(x_hat.reshape(shape), problem.x_true.reshape(shape))
    report = MetricReport(psnr=p, mse=m, residual_norm=residual_norm(problem, x_hat),
                          runtime_seconds=result.runtime_seconds,
                          ssim=None if np.isnan(s) else s)
    result.metrics = report
    return report


def best_of_k(problem: ProblemInstance, sampler, k: int, selector: str = "residual") -> RunResult:
    """Run k independently seeded reconstructions and keep the best.

    Selection uses the measurement residual by default (no ground truth
    needed) or PSNR when requested and available. Candidate summaries are
    retained in the returned result's extras.
    """
    if k < 1:
        raise ValueError(f"best_of_k: k must be >= 1, got {k}")
    if selector not in ("residual", "psnr"):
        raise ValueError(f"best_of_k: unknown selector {selector!r}")
    if selector == "psnr" and problem.x_true is None:
        raise ValueError("best_of_k: psnr selector needs a ground truth")
    base_seed = sampler.seed
    candidates = []
    for j in range(k):
        runner = clone(sampler)
        runner.seed = derive_seed(base_seed, 17, j)
        result = runner.reconstruct(problem)
        res = residual_norm(problem, result.x_hat)
        quality = psnr(result.x_hat, problem.x_true) if problem.x_true is not None else float("nan")
        candidates.append((result, res, quality))
    if selector == "residual":
        best = min(candidates, key=lambda c: c[1])
    else:
        best = max(candidates, key=lambda c: c[2])
    result = best[0]
    result.extras["candidates"] = [
        {"seed": c[0].seed, "residual": c[1], "psnr": c[2]} for c in candidates
    ]
    return result


# -- execution ---------------------------------------------------------------------


@dataclass
class ExperimentOutput:
    out_dir: Path
    fingerprint: str
    rows: list
    results_path: Path
    summary_path: Path
    check_results: list = field(default_factory=list)

    @property
    def all_checks_passed(self) -> bool:
        return all(ok for _, ok, _ in self.check_results)


def _run_cell(spec, model, sched, problem, rep, run_seed, best_of):
    sampler = _build_sampler(spec, model, sched, problem, run_seed)
    if best_of and best_of["k"] > 1:
        result = best_of_k(problem, sampler, best_of["k"], best_of["selector"])
    else:
        result = sampler.reconstruct(problem)
    report = _measure(result, problem)
    delta_val = (_resolve_delta(spec["delta"], problem)
                 if spec["variant"] in ("triple", "triple-ode", "no-backward") else 0.0)
    row = {
        "label": spec["label"], "variant": spec["variant"], "n_steps": spec["n_steps"],
        "n_inner": spec["n_inner"], "lam": spec["lam"], "delta": delta_val,
        "seed": run_seed, "psnr": report.psnr,
        "ssim": "" if report.ssim is None else report.ssim,
        "residual": report.residual_norm, "runtime": report.runtime_seconds,
        "iterations": result.total_inner_iterations, "error": "",
    }
    return row, result, rep


def _cell_jobs(cfg, model, sched, problems):
    for spec in cfg["samplers"]:
        for rep, problem in enumerate(problems):
            run_seed = derive_seed(cfg["seed"], 19, rep)
            yield spec, model, sched, problem, rep, run_seed, cfg["best_of"]


def run_experiment(raw_config: dict, out_root, write_curves: bool = False) -> ExperimentOutput:
    """Execute every sampler spec over every repetition; write CSVs and images."""
    cfg = resolve_config(raw_config)
    fp = config_fingerprint(cfg)
    out_dir = Path(out_root) / cfg["name"]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))

    sched = _build_schedule(cfg)
    shape = signal_shape_for(cfg["dataset"]["kind"])
    model = _build_model(cfg, sched, shape)
    operator = operator_from_config(cfg["operator"], shape)
    problems = _build_problems(cfg, operator, shape)

    jobs = list(_cell_jobs(cfg, model, sched, problems))
    rows, results = [], {}
    if int(cfg["workers"]) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["workers"])) as pool:
            outcomes = list(pool.map(_run_cell_star, jobs))
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append(_run_cell(*job))
            except Exception as exc:  # recorded, sweep continues
                spec, rep = job[0], job[4]
                outcomes.append((_error_row(spec, job[5], exc), None, rep))
    for row, result, rep in outcomes:
        row["fingerprint"] = fp
        rows.append(row)
        if result is not None:
            results[(row["label"], rep)] = result

    rows.sort(key=lambda r: (r["label"], r["seed"]))
    results_path = out_dir / "results.csv"
    summary_path = out_dir / "summary.csv"
    write_results_csv(results_path, rows)
    summary = summarize_rows(rows)
    write_summary_csv(summary_path, summary)
    _write_images(cfg, out_dir, problems, results)
    if write_curves:
        _write_curves(cfg, out_dir, results)

    check_results = run_checks(cfg["checks"], summary)
    (out_dir / "checks.json").write_text(json.dumps(
        [{"check": c, "passed": ok, "detail": detail} for c, ok, detail in check_results],
        indent=2))
    return ExperimentOutput(out_dir, fp, rows, results_path, summary_path, check_results)


def _run_cell_star(job):
    try:
        return _run_cell(*job)
    except Exception as exc:
        return _error_row(job[0], job[5], exc), None, job[4]


def _error_row(spec, run_seed, exc) -> dict:
    return {
        "label": spec["label"], "variant": spec["variant"], "n_steps": spec["n_steps"],
        "n_inner": spec["n_inner"], "lam": spec["lam"], "delta": "",
        "seed": run_seed, "psnr": "", "ssim": "", "residual": "", "runtime": "",
        "iterations": "", "error": f"{type(exc).__name__}: {exc}",
    }


def _write_images(cfg, out_dir, problems, results):
    n_images = int(cfg["images"])
    shape = signal_shape_for(cfg["dataset"]["kind"])
    if n_images <= 0 or len(shape) != 2:
        return
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    for rep, problem in enumerate(problems[:n_images]):
        write_pgm(img_dir / f"truth_{rep}.pgm", problem.x_true.reshape(shape))
        for spec in cfg["samplers"]:
            result = results.get((spec["label"], rep))
            if result is not None:
                write_pgm(img_dir / f"{spec['label']}_{rep}.pgm", result.x_hat.reshape(shape))


# -- sweeps -----------------------------------------------------------------------


def ablation_sweep(raw_config: dict, axis: str, out_root) -> ExperimentOutput:
    """Grid execution along one axis with shared problems and run seeds.

    'n-k' crosses sweep.n_steps with sweep.n_inner; 'lambda' varies the
    regularization weight; 'delta' multiplies sigma_y*sqrt(m) by each
    entry of sweep.delta_multipliers. The grid is applied to the first
    sampler spec; per-cell PSNR traces are written under curves/.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r} (valid: {SWEEP_AXES})")
    cfg = resolve_config(raw_config)
    if cfg["sweep"] is None:
        raise ValueError("config has no sweep section")
    base = cfg["samplers"][0]
    sweep = cfg["sweep"]
    cells = []
    if axis == "n-k":
        grid_n = sweep["n_steps"] or [base["n_steps"]]
        grid_k = sweep["n_inner"] or [base["n_inner"]]
        for n in grid_n:
            for k in grid_k:
                cells.append({**base, "n_steps": int(n), "n_inner": int(k),
                              "label": f"{base['variant']}-N{n}-K{k}"})
    elif axis == "lambda":
        for lam in sweep["lam"] or [base["lam"]]:
            cells.append({**base, "lam": float(lam), "label": f"{base['variant']}-lam{lam}"})
    else:
        for mult in sweep["delta_multipliers"] or [1.0]:
            cells.append({**base, "delta": {"multiplier": float(mult)},
                          "label": f"{base['variant']}-delta{mult}"})
    if len(cells) > int(sweep["max_cells"]):
        raise ValueError(f"sweep grid has {len(cells)} cells, cap is {sweep['max_cells']}")

    sweep_cfg = dict(raw_config)
    sweep_cfg["samplers"] = cells
    sweep_cfg["name"] = f"{cfg['name']}-sweep-{axis}"
    sweep_cfg.pop("sweep", None)
    return run_experiment(sweep_cfg, out_root, write_curves=True)


def _write_curves(cfg, out_dir: Path, results: dict):
    """One CSV per cell with the per-inner-iteration PSNR of the running
    clean estimate, the raw material for convergence plots."""
    curve_dir = out_dir / "curves"
    curve_dir.mkdir(exist_ok=True)
    by_label: dict[str, list] = {}
    for (label, rep), result in sorted(results.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        by_label.setdefault(label, []).append((rep, result))
    for label, entries in by_label.items():
        with open(curve_dir / f"{label}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "step", "t", "inner_iter", "psnr"])
            for rep, result in entries:
                for step in result.steps:
                    for k, value in enumerate(step.psnr_trace):
                        writer.writerow([rep, step.index, step.t, k, _fmt(float(value))])


# -- CSV I/O -----------------------------------------------------------------------


def _fmt(value) -> str:
    # repr of a builtin float is the shortest exact round-trip, so equal
    # bits always serialize to equal strings
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in RESULT_COLUMNS})


def read_results_csv(path) -> list:
    with open(path, "r", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_rows(rows) -> list:
    """Per-label mean and std of the metric columns; a pure function of rows."""
    groups: dict[str, list] = {}
    for row in rows:
        if str(row.get("error", "")):
            continue
        groups.setdefault(str(row["label"]), []).append(row)
    summary = []
    for label in sorted(groups):
        got = groups[label]
        def col(name):
            vals = [float(r[name]) for r in got if str(r[name]) != ""]
            return np.array(vals) if vals else np.array([np.nan])
        p, s, res, rt = col("psnr"), col("ssim"), col("residual"), col("runtime")
        summary.append({
            "label": label, "variant": got[0]["variant"], "runs": len(got),
            "psnr_mean": p.mean(), "psnr_std": p.std(),
            "ssim_mean": s.mean(), "ssim_std": s.std(),
            "residual_mean": res.mean(), "residual_std": res.std(),
            "runtime_mean": rt.mean(),
        })
    return summary


SUMMARY_COLUMNS = ["label", "variant", "runs", "psnr_mean", "psnr_std", "ssim_mean",
                   "ssim_std", "residual_mean", "residual_std", "runtime_mean"]


def write_summary_csv(path, summary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summary:
            writer.writerow({k: _fmt(row[k]) for k in SUMMARY_COLUMNS})


def write_report(results_csv_path, out_path=None) -> list:
    """Summarize an existing results.csv; optionally write summary CSV."""
    rows = read_results_csv(results_csv_path)
    summary = summarize_rows(rows)
    if out_path is not None:
        write_summary_csv(out_path, summary)
    return summary


# -- config checks -------------------------------------------------------------------


def run_checks(checks, summary) -> list:
    """Evaluate acceptance-style checks against a summary table."""
    by_label = {row["label"]: row for row in summary}
    by_variant: dict[str, dict] = {}
    for row in summary:
        by_variant.setdefault(row["variant"], row)

    def lookup(name):
        if name in by_label:
            return by_label[name]
        if name in by_variant:
            return by_variant[name]
        raise KeyError(f"check references unknown sampler {name!r}")

    results = []
    for chk in checks:
        kind = chk["type"]
        try:
            if kind == "min-mean-psnr":
                row = lookup(chk["label"])
                ok = row["psnr_mean"] >= float(chk["value"])
                detail = f"psnr_mean={row['psnr_mean']:.3f} vs min {chk['value']}"
            elif kind == "max-mean-residual":
                row = lookup(chk["label"])
                ok = row["residual_mean"] <= float(chk["value"])
                detail = f"residual_mean={row['residual_mean']:.4g} vs max {chk['value']}"
            elif kind == "psnr-gap":
                better = lookup(chk["better"])
                worse = lookup(chk["worse"])
                gap = better["psnr_mean"] - worse["psnr_mean"]
                ok = gap >= float(chk["min_db"])
                detail = f"gap={gap:.3f} dB vs min {chk['min_db']}"
            else:
                ok, detail = False, f"unknown check type {kind!r}"
        except KeyError as exc:
            ok, detail = False, str(exc)
        results.append((chk, bool(ok), detail))
    return results
