"""Experiment driver: data generation, training runs, evaluation,
reparameterization demos, MAP comparisons, uncertainty grids, and
hyperparameter sweeps.

Configs are flat ``key = value`` text; list values in square brackets
spell out sweep grids. Every command writes its outputs atomically and
drops a manifest recording the exact config, seed, and package version.
Exit codes: 0 success, 2 bad config or data, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import tempfile
from dataclasses import asdict, replace

import jsonschema
import numpy as np

from . import __version__
from .data import DATASET_NAMES, DataSet, gen_synthetic, ground_truth_fn, load_csv, standardize
from .diffcore import Architecture
from .exceptions import ConfigError, CsvParseError, DivergenceError
from .metrics import avg_marginal_ll, compute_report, uncertainty_decomposition
from .model import FixedFunction, PriorConfig, predictive_sample_matrix
from .ncai import NcaiConfig, map_estimate
from .nonident import bias_probability
from .train import METHODS, TrainConfig, train_restarts
from .vi import MeanFieldPosterior

# ---------------------------------------------------------------------------
# config files

_SCALAR_KEYS = {
    "method", "dataset", "data_seed", "sizes", "distill", "standardize",
    "train_csv", "val_csv", "test_csv", "n_targets",
    "hidden", "latent_dim", "leaky_slope",
    "sigma2_w", "sigma2_z", "sigma2_eps", "ig_alpha", "ig_beta", "eb_w", "eb_z",
    "lambda1", "lambda2", "lambda3", "eps_t", "eps_x", "eps_y",
    "learning_rate", "epochs", "restarts", "n_mc", "warm_epochs", "init",
    "variance_only_first", "convergence_tol", "convergence_window", "batch_size",
    "s_eval",
}

# keys a grid sweep may hold lists for; `hidden` and `sizes` are structural
# lists and never expanded
GRID_KEYS = (
    "lambda1", "lambda2", "lambda3", "eps_t", "eps_x", "eps_y",
    "learning_rate", "sigma2_w", "sigma2_z", "sigma2_eps", "n_mc",
)


def _parse_scalar(tok):
    t = tok.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_config(text):
    """Parse flat key=value config text; [a, b] values become lists."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key or not val:
            raise ConfigError(f"config line {lineno}: empty key or value")
        if key not in _SCALAR_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if val.startswith("["):
            if not val.endswith("]"):
                raise ConfigError(f"config line {lineno}: unterminated list")
            items = [s for s in (p.strip() for p in val[1:-1].split(",")) if s]
            cfg[key] = [_parse_scalar(s) for s in items]
        else:
            cfg[key] = _parse_scalar(val)
    return cfg


def expand_grid(cfg):
    """All config cells implied by list-valued sweep keys (product order)."""
    listed = [(k, cfg[k]) for k in GRID_KEYS if isinstance(cfg.get(k), list)]
    if not listed:
        return [dict(cfg)]
    cells = []
    for combo in itertools.product(*(vals for _, vals in listed)):
        cell = dict(cfg)
        cell.update({k: v for (k, _), v in zip(listed, combo)})
        cells.append(cell)
    return cells


# ---------------------------------------------------------------------------
# atomic output helpers

def _write_text_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj, schema=None):
    if schema is not None:
        jsonschema.validate(obj, schema)
    _write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(c) for c in row])
    _write_text_atomic(path, buf.getvalue())


def _fmt(c):
    if isinstance(c, float):
        return format(c, ".17g")
    return c


def _write_manifest(out_dir, command, config, seed):
    _write_json(
        os.path.join(out_dir, "manifest.json"),
        {"command": command, "config": config, "seed": seed, "version": __version__},
    )


# ---------------------------------------------------------------------------
# result schemas

_NUM_OR_NULL = {"type": ["number", "null"]}

METRICS_SCHEMA = {
    "type": "object",
    "required": ["method", "avg_marginal_ll", "rmse", "picp", "mpiw"],
    "properties": {
        "method": {"type": "string"},
        "avg_marginal_ll": {"type": "number"},
        "rmse": {"type": "number"},
        "picp": {"type": "number"},
        "mpiw": {"type": "number"},
        "recon_mse": _NUM_OR_NULL,
        "mi_x_z": _NUM_OR_NULL,
        "mi_y_z": _NUM_OR_NULL,
        "pc_x_z": _NUM_OR_NULL,
        "pc_y_z": _NUM_OR_NULL,
        "hz_mu_z": _NUM_OR_NULL,
        "ks_z_prior": _NUM_OR_NULL,
        "js_z_prior": _NUM_OR_NULL,
    },
    "additionalProperties": False,
}

RESULT_SCHEMA = {
    "type": "object",
    "required": ["method", "dataset", "seed", "best_restart", "priors", "metrics", "version"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "dataset": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "best_restart": {"type": "integer"},
        "priors": {
            "type": "object",
            "required": ["sigma2_w", "sigma2_z", "sigma2_eps"],
        },
        "metrics": METRICS_SCHEMA,
        "version": {"type": "string"},
        "val_avg_marginal_ll": {"type": "number"},
        "epochs": {"type": "integer"},
        "restarts": {"type": "integer"},
    },
}

GAPS_SCHEMA = {
    "type": "object",
    "required": ["transform", "records"],
    "properties": {
        "transform": {"type": "object"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["n", "frac_positive", "mean_gap", "mean_latent_gap_per_obs"],
            },
        },
    },
}


# ---------------------------------------------------------------------------
# experiment assembly

def _require(cfg, key, default=None):
    val = cfg.get(key, default)
    if val is None:
        raise ConfigError(f"config is missing required key {key!r}")
    return val


def _merge_splits(tr, va, te):
    x = np.concatenate([tr.x, va.x, te.x], axis=0)
    y = np.concatenate([tr.y, va.y, te.y], axis=0)
    n_tr, n_va = tr.n, va.n
    return DataSet(
        x=x,
        y=y,
        train_idx=np.arange(n_tr),
        val_idx=np.arange(n_tr, n_tr + n_va),
        test_idx=np.arange(n_tr + n_va, x.shape[0]),
        name=tr.name,
    )


def build_dataset(cfg, seed):
    if "dataset" in cfg:
        sizes = cfg.get("sizes")
        data = gen_synthetic(
            cfg["dataset"],
            seed=cfg.get("data_seed", seed),
            sizes=tuple(sizes) if sizes else None,
            distill=bool(cfg.get("distill", False)),
        )
    elif "train_csv" in cfg:
        n_targets = int(cfg.get("n_targets", 1))
        parts = [
            load_csv(_require(cfg, key), n_targets)
            for key in ("train_csv", "val_csv", "test_csv")
        ]
        data = _merge_splits(*parts)
    else:
        raise ConfigError("config needs either dataset= or train_csv=/val_csv=/test_csv=")
    if cfg.get("standardize", False):
        data = standardize(data)
    return data


def build_experiment(cfg, seed):
    """Turn a flat config dict into (data, arch, priors, ncai_cfg, train_cfg, method)."""
    method = cfg.get("method", "NCAI")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose one of {METHODS}")
    data = build_dataset(cfg, seed)
    hidden = cfg.get("hidden", [50])
    if isinstance(hidden, int):
        hidden = [hidden]
    latent_dim = int(cfg.get("latent_dim", 0 if method == "BNN" else 1))
    arch = Architecture(
        input_dim_x=data.input_dim,
        input_dim_z=latent_dim,
        hidden_layers=tuple(int(h) for h in hidden),
        output_dim=data.output_dim,
        leaky_slope=float(cfg.get("leaky_slope", 0.01)),
    )
    sigma2_z = cfg.get("sigma2_z", data.sigma2_z_true)
    sigma2_eps = cfg.get("sigma2_eps", data.sigma2_eps_true)
    priors = PriorConfig(
        sigma2_w=float(cfg.get("sigma2_w", 1.0)),
        sigma2_z=float(1.0 if sigma2_z is None else sigma2_z),
        sigma2_eps=float(0.1 if sigma2_eps is None else sigma2_eps),
        ig_alpha=float(cfg.get("ig_alpha", 3.0)),
        ig_beta=float(cfg.get("ig_beta", 0.5)),
        eb_w=bool(cfg.get("eb_w", True)),
        eb_z=bool(cfg.get("eb_z", cfg.get("sigma2_z", data.sigma2_z_true) is None)),
    )
    ncai_cfg = NcaiConfig(
        lambda1=float(cfg.get("lambda1", 1.0)),
        lambda2=float(cfg.get("lambda2", 10.0)),
        lambda3=float(cfg.get("lambda3", 1.0)),
        eps_t=float(cfg.get("eps_t", 0.01)),
        eps_x=float(cfg.get("eps_x", 0.5)),
        eps_y=float(cfg.get("eps_y", 0.1)),
    )
    train_cfg = TrainConfig(
        learning_rate=float(cfg.get("learning_rate", 0.01)),
        epochs=int(cfg.get("epochs", 3000)),
        restarts=int(cfg.get("restarts", 10)),
        n_mc=int(cfg.get("n_mc", 1)),
        warm_epochs=int(cfg.get("warm_epochs", 2000)),
        init=str(cfg.get("init", "auto")),
        variance_only_first=cfg.get("variance_only_first"),
        convergence_tol=float(cfg.get("convergence_tol", 1e-6)),
        convergence_window=int(cfg.get("convergence_window", 200)),
        batch_size=cfg.get("batch_size"),
    )
    return data, arch, priors, ncai_cfg, train_cfg, method


def _apply_overrides(cfg, args):
    cfg = dict(cfg)
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    if getattr(args, "restarts", None) is not None:
        cfg["restarts"] = args.restarts
    return cfg


def _run_training(cfg, seed, jobs, out_dir):
    """Train per config, write the full run directory, return the result dict."""
    data, arch, priors, ncai_cfg, train_cfg, method = build_experiment(cfg, seed)
    q, fin_priors, histories, best = train_restarts(
        data, arch, priors, ncai_cfg, train_cfg, method, seed, jobs=jobs
    )
    s_eval = int(cfg.get("s_eval", 2000))
    report = compute_report(q, data, fin_priors, method=method, s=s_eval, seed=seed)
    val_ll = avg_marginal_ll(q, data, fin_priors, which="val", s=s_eval, seed=seed + 9)
    result = {
        "method": method,
        "dataset": cfg.get("dataset", cfg.get("train_csv")),
        "seed": int(seed),
        "best_restart": int(best),
        "priors": {k: v for k, v in asdict(fin_priors).items()},
        "metrics": report.to_dict(),
        "val_avg_marginal_ll": val_ll,
        "epochs": train_cfg.epochs,
        "restarts": train_cfg.restarts,
        "version": __version__,
    }
    _write_json(os.path.join(out_dir, "result.json"), result, schema=RESULT_SCHEMA)
    hist = histories[best]
    _write_csv(os.path.join(out_dir, "history.csv"), hist.COLUMNS, hist.rows())
    _write_json(
        os.path.join(out_dir, "model.json"),
        {"method": method, "posterior": q.to_dict(), "priors": asdict(fin_priors)},
    )
    if data.input_dim == 1:
        _write_predictive_grid(out_dir, q, fin_priors, data, s=max(200, min(s_eval, 500)))
    if arch.input_dim_z > 0:
        train_view = data.view("train")
        header = (
            ["x%d" % j for j in range(data.input_dim)]
            + ["y%d" % j for j in range(data.output_dim)]
            + ["mu_z%d" % j for j in range(arch.input_dim_z)]
        )
        rows = np.concatenate([train_view.x, train_view.y, q.mu_z], axis=1)
        _write_csv(os.path.join(out_dir, "latent_means.csv"), header, rows.tolist())
    return result


def _write_predictive_grid(out_dir, q, priors, data, s, points=200):
    lo, hi = float(np.min(data.x)), float(np.max(data.x))
    grid = np.linspace(lo, hi, points).reshape(-1, 1)
    draws = predictive_sample_matrix(q, priors, grid, s, seed=7)[:, :, 0]
    qs = np.percentile(draws, [2.5, 25.0, 50.0, 75.0, 97.5], axis=1)
    rows = np.column_stack([grid[:, 0], qs.T, draws.mean(axis=1)]).tolist()
    _write_csv(
        os.path.join(out_dir, "predictive_grid.csv"),
        ("x", "q025", "q25", "q50", "q75", "q975", "mean"),
        rows,
    )


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else None
    data = gen_synthetic(args.name, args.seed, sizes=sizes, distill=args.distill)
    out = args.out
    x_cols = ["x%d" % j for j in range(data.input_dim)]
    y_cols = ["y%d" % j for j in range(data.output_dim)]
    for which in ("train", "val", "test"):
        view = data.view(which)
        rows = np.concatenate([view.x, view.y], axis=1).tolist()
        _write_csv(os.path.join(out, f"{which}.csv"), x_cols + y_cols, rows)
    if data.z_true is not None:
        z_cols = ["z%d" % j for j in range(data.z_true.shape[1])]
        _write_csv(
            os.path.join(out, "latents_train.csv"),
            z_cols,
            data.view("train").z_true.tolist(),
        )
    if data.w_true is not None:
        _write_json(
            os.path.join(out, "ground_truth.json"),
            {
                "arch": {
                    "input_dim_x": data.gt_arch.input_dim_x,
                    "input_dim_z": data.gt_arch.input_dim_z,
                    "hidden_layers": list(data.gt_arch.hidden_layers),
                    "output_dim": data.gt_arch.output_dim,
                    "leaky_slope": data.gt_arch.leaky_slope,
                },
                "w": data.w_true.tolist(),
                "sigma2_eps": data.sigma2_eps_true,
                "sigma2_z": data.sigma2_z_true,
            },
        )
    config = {
        "name": args.name,
        "sizes": list(sizes) if sizes else None,
        "distill": args.distill,
    }
    _write_manifest(out, "gen-data", config, args.seed)
    print(json.dumps({"out": out, "n": data.n}))
    return 0


def cmd_train(args):
    with open(args.config) as fh:
        cfg = parse_config(fh.read())
    cfg = _apply_overrides(cfg, args)
    for key in GRID_KEYS:
        if isinstance(cfg.get(key), list):
            raise ConfigError(f"{key} is a list; sweeps run through the grid subcommand")
    result = _run_training(cfg, args.seed, args.jobs, args.out)
    _write_manifest(args.out, "train", cfg, args.seed)
    print(
        json.dumps(
            {
                "out": args.out,
                "avg_marginal_ll": result["metrics"]["avg_marginal_ll"],
                "rmse": result["metrics"]["rmse"],
            }
        )
    )
    return 0


def _load_model(path):
    with open(path) as fh:
        blob = json.load(fh)
    q = MeanFieldPosterior.from_dict(blob["posterior"])
    priors = PriorConfig(**blob["priors"])
    return q, priors, blob.get("method", "NCAI")


def cmd_evaluate(args):
    q, priors, method = _load_model(args.model)
    if args.dataset:
        cfg = {"dataset": args.dataset}
        if args.sizes:
            cfg["sizes"] = [int(s) for s in args.sizes.split(",")]
    else:
        cfg = {
            "train_csv": args.train_csv, "val_csv": args.val_csv, "test_csv": args.test_csv,
        }
    data = build_dataset(cfg, args.seed)
    report = compute_report(q, data, priors, method=method, s=args.samples, seed=args.seed)
    _write_json(os.path.join(args.out, "metrics.json"), report.to_dict(), schema=METRICS_SCHEMA)
    _write_manifest(args.out, "evaluate", {"model": args.model, **cfg}, args.seed)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_nonident_demo(args):
    if args.transform == "node":
        transform = {"kind": "node", "c": args.c}
    else:
        transform = {"kind": "layer", "t_scale": args.t_scale, "hidden": args.hidden}
    priors = PriorConfig(sigma2_w=args.sigma2_w, sigma2_z=args.sigma2_z)
    n_values = [int(s) for s in args.n.split(",")]
    records = bias_probability(
        transform,
        n_values,
        args.trials,
        priors,
        ("normal", args.mu_x, args.sigma2_x),
        args.seed,
    )
    out_obj = {"transform": transform, "records": records}
    _write_json(os.path.join(args.out, "gaps.json"), out_obj, schema=GAPS_SCHEMA)
    config = {
        "transform": transform, "n": n_values, "trials": args.trials,
        "mu_x": args.mu_x, "sigma2_x": args.sigma2_x,
        "sigma2_z": args.sigma2_z, "sigma2_w": args.sigma2_w,
    }
    _write_manifest(args.out, "nonident-demo", config, args.seed)
    print(json.dumps(out_obj["records"]))
    return 0


def cmd_map_demo(args):
    data = gen_synthetic(args.dataset, args.seed, distill=True)
    priors = PriorConfig(
        sigma2_w=args.sigma2_w,
        sigma2_z=data.sigma2_z_true,
        sigma2_eps=data.sigma2_eps_true,
    )
    arch = data.gt_arch
    opt = TrainConfig(epochs=args.epochs, restarts=1, learning_rate=args.learning_rate)
    seeds = np.random.SeedSequence(args.seed).spawn(args.restarts)
    random_runs = [
        map_estimate(data, priors, arch, init="random", opt_cfg=opt,
                     seed=int(s.generate_state(1)[0]))
        for s in seeds
    ]
    gt_run = map_estimate(data, priors, arch, init="ground_truth", opt_cfg=opt, seed=args.seed)
    random_ljs = [r.log_joint for r in random_runs]
    out_obj = {
        "dataset": args.dataset,
        "random_log_joints": random_ljs,
        "best_random": max(random_ljs),
        "ground_truth_log_joint": gt_run.log_joint,
        "gap": max(random_ljs) - gt_run.log_joint,
    }
    _write_json(os.path.join(args.out, "map.json"), out_obj)
    config = {
        "dataset": args.dataset, "restarts": args.restarts,
        "epochs": args.epochs, "sigma2_w": args.sigma2_w,
    }
    _write_manifest(args.out, "map-demo", config, args.seed)
    print(json.dumps({"best_random": out_obj["best_random"], "gap": out_obj["gap"]}))
    return 0


def _parse_grid_spec(spec):
    try:
        lo, hi, count = spec.split(":")
        return np.linspace(float(lo), float(hi), int(count))
    except ValueError:
        raise ConfigError(f"bad x-grid spec {spec!r}; expected lo:hi:count") from None


def cmd_decompose(args):
    if args.model:
        q_w, priors, _ = _load_model(args.model)
    elif args.dataset:
        probe = gen_synthetic(args.dataset, 0, sizes=(2, 1, 1))
        if probe.sigma2_z_true is None:
            raise ConfigError(f"dataset {args.dataset!r} has no latent-noise ground truth")
        q_w = FixedFunction(ground_truth_fn(args.dataset), input_dim_z=1, output_dim=1)
        priors = PriorConfig(
            sigma2_z=probe.sigma2_z_true, sigma2_eps=probe.sigma2_eps_true
        )
    else:
        raise ConfigError("decompose needs --model or --dataset")
    grid = _parse_grid_spec(args.x_grid)
    rows = []
    for i, xv in enumerate(grid):
        parts = uncertainty_decomposition(
            q_w, priors, np.array([xv]), s_w=args.s_w, s_y=args.s_inner,
            seed=args.seed + i,
        )
        rows.append((float(xv), parts["total"], parts["aleatoric"], parts["epistemic"]))
    _write_csv(
        os.path.join(args.out, "decomposition.csv"),
        ("x", "total", "aleatoric", "epistemic"),
        rows,
    )
    config = {
        "model": args.model, "dataset": args.dataset, "x_grid": args.x_grid,
        "s_w": args.s_w, "s_inner": args.s_inner,
    }
    _write_manifest(args.out, "decompose", config, args.seed)
    print(json.dumps({"out": args.out, "points": len(rows)}))
    return 0


def cmd_grid(args):
    with open(args.config) as fh:
        cfg = parse_config(fh.read())
    cfg = _apply_overrides(cfg, args)
    cells = expand_grid(cfg)
    summaries = []
    for i, cell in enumerate(cells):
        cell_dir = os.path.join(args.out, f"cell_{i:03d}")
        result = _run_training(cell, args.seed, args.jobs, cell_dir)
        _write_manifest(cell_dir, "grid-cell", cell, args.seed)
        summaries.append(
            {
                "dir": cell_dir,
                "config": {k: cell[k] for k in GRID_KEYS if k in cell},
                "val_avg_marginal_ll": result["val_avg_marginal_ll"],
                "test_avg_marginal_ll": result["metrics"]["avg_marginal_ll"],
            }
        )
    best = int(np.argmax([s["val_avg_marginal_ll"] for s in summaries]))
    out_obj = {"cells": summaries, "best": best, "best_config": summaries[best]["config"]}
    _write_json(os.path.join(args.out, "grid.json"), out_obj)
    _write_manifest(args.out, "grid", cfg, args.seed)
    print(json.dumps({"best": best, "best_config": summaries[best]["config"]}))
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bnnlv",
        description="Latent-input Bayesian network experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, epochs=False, restarts=False, jobs=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        if jobs:
            p.add_argument("--jobs", type=int, default=1)
        if epochs:
            p.add_argument("--epochs", type=int, default=None)
        if restarts:
            p.add_argument("--restarts", type=int, default=None)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV splits")
    p.add_argument("--name", required=True, choices=DATASET_NAMES)
    p.add_argument("--sizes", default=None, help="train,val,test counts")
    p.add_argument("--distill", action="store_true",
                   help="refit targets through a net so ground-truth weights exist")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit one model per a config file")
    p.add_argument("--config", required=True)
    common(p, epochs=True, restarts=True, jobs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric report for a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", default=None, choices=DATASET_NAMES)
    p.add_argument("--sizes", default=None, help="train,val,test counts for --dataset")
    p.add_argument("--train-csv", dest="train_csv", default=None)
    p.add_argument("--val-csv", dest="val_csv", default=None)
    p.add_argument("--test-csv", dest="test_csv", default=None)
    p.add_argument("--samples", type=int, default=2000)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("nonident-demo", help="Monte Carlo log-joint gaps for the transforms")
    p.add_argument("--transform", required=True, choices=("node", "layer"))
    p.add_argument("--c", type=float, default=0.99)
    p.add_argument("--t-scale", dest="t_scale", type=float, default=0.5)
    p.add_argument("--hidden", type=int, default=5)
    p.add_argument("--n", default="10,100,1000")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--mu-x", dest="mu_x", type=float, default=0.0)
    p.add_argument("--sigma2-x", dest="sigma2_x", type=float, default=1.0)
    p.add_argument("--sigma2-z", dest="sigma2_z", type=float, default=0.01)
    p.add_argument("--sigma2-w", dest="sigma2_w", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_nonident_demo)

    p = sub.add_parser("map-demo", help="best-of-restarts MAP vs the generative configuration")
    p.add_argument("--dataset", default="heavy_tail", choices=("heavy_tail", "depeweg", "bimodal"))
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.01)
    p.add_argument("--sigma2-w", dest="sigma2_w", type=float, default=10.0)
    common(p, epochs=True, restarts=True)
    p.set_defaults(func=cmd_map_demo)

    p = sub.add_parser("decompose", help="entropy split across an input grid")
    p.add_argument("--model", default=None)
    p.add_argument("--dataset", default=None, choices=("heavy_tail", "depeweg", "bimodal"))
    p.add_argument("--x-grid", dest="x_grid", default="-4:4:9")
    p.add_argument("--s-w", dest="s_w", type=int, default=50)
    p.add_argument("--s-inner", dest="s_inner", type=int, default=400)
    common(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("grid", help="sweep list-valued config keys, select by validation")
    p.add_argument("--config", required=True)
    common(p, epochs=True, restarts=True, jobs=True)
    p.set_defaults(func=cmd_grid)

    return parser


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    # grid specs like -4:4:9 start with a dash; fold them into the flag so
    # argparse does not read them as an unknown option
    argv = list(argv)
    for i, tok in enumerate(argv[:-1]):
        if tok == "--x-grid" and argv[i + 1].startswith("-"):
            argv[i : i + 2] = [f"--x-grid={argv[i + 1]}"]
            break
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = os.path.join("runs", args.command)
    if getattr(args, "epochs", None) is not None and args.epochs is not None:
        if args.command == "map-demo" and args.epochs <= 0:
            return _fail(2, "config", "--epochs must be positive")
    if args.command == "map-demo":
        if args.epochs is None:
            args.epochs = 3000
        if args.restarts is None:
            args.restarts = 9
    try:
        return args.func(args)
    except (ConfigError, CsvParseError, FileNotFoundError) as e:
        return _fail(2, "config", str(e))
    except DivergenceError as e:
        return _fail(3, "divergence", str(e))
    except jsonschema.ValidationError as e:
        return _fail(3, "internal", f"output failed schema validation: {e.message}")


if __name__ == "__main__":
    sys.exit(main())
