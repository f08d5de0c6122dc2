"""Command-line front end.

Every subcommand resolves its parameters from built-in defaults, then an
optional INI-style ``--config`` file (one ``[section]`` per subcommand plus an
optional ``[common]`` section), then explicit flags. The resolved config is
written to ``<out>/config.json`` before any work starts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .benchmark import MIN_TRIALS, QuadraticLoss, cost_scaling_probe, estimator_bias_variance, temperature_sweep
from .data import make_synthetic_bimodal
from .estimators import ESTIMATORS, check_temperature
from .search import (
    ADAPTIVE_WINDOW, ARCH_LR, WARMUP_EPOCHS, WEIGHT_LR, AdaptiveK, DivergenceError, SearchTrace,
    ablate, retrain_derived, search,
)
from .seeding import derive_rng, derive_seed
from .supernet import Supernet, SupernetConfig

log = logging.getLogger("gumbelnas")

BENCH_COLUMNS = ("estimator", "C", "lambda", "K", "trials", "bias_norm", "variance", "mse", "ci_halfwidth", "wall_ms")
SWEEP_COLUMNS = ("estimator", "lambda", "variance", "fitted_slope")
TRACE_COLUMNS = SearchTrace.COLUMNS
ABLATE_COLUMNS = ("lambda", "k", "seed", "retrain_acc", "var_alpha", "wall_ms", "failure")
COST_COLUMNS = ("n", "k", "wall_ms", "fit_c", "fit_r2")
TIMING_COLUMNS = frozenset({"wall_ms", "fit_c", "fit_r2"})


class UsageError(Exception):
    pass


def _list(conv: Callable) -> Callable:
    def parse(value):
        if isinstance(value, (list, tuple)):
            return [conv(v) for v in value]
        return [conv(v.strip()) for v in str(value).split(",") if v.strip()]
    return parse


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


COMMON = {
    "seed": (int, 0),
    "out": (str, "out"),
    "workers": (int, 1),
}

PARAMS: dict[str, dict[str, tuple]] = {
    "estimator-bench": {
        "estimators": (_list(str), ["stgs", "grmc"]),
        "classes": (_list(int), [8]),
        "lambda": (_list(float), [0.1]),
        "k": (_list(int), [100]),
        "trials": (int, 100000),
    },
    "temp-sweep": {
        "estimators": (_list(str), ["stgs", "grmc"]),
        "lambdas": (_list(float), [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]),
        "k": (int, 1000),
        "classes": (int, 4),
        "trials": (int, 1000000),
        "grmc_trials": (int, 20000),
        "fit_max": (float, None),
    },
    "search": {
        "estimator": (str, "grmc"),
        "lambda": (float, 0.1),
        "k": (int, 100),
        "epochs": (int, 50),
        "warmup": (int, WARMUP_EPOCHS),
        "retrain_epochs": (int, 20),
        "hidden": (int, 16),
        "nodes": (int, 3),
        "n": (int, 2000),
        "dims": (_list(int), [8, 8]),
        "weight_lr": (float, WEIGHT_LR),
        "arch_lr": (float, ARCH_LR),
        "adaptive_target": (float, None),
        "k_min": (int, 10),
        "k_max": (int, 1000),
        "window": (int, ADAPTIVE_WINDOW),
    },
    "ablate": {
        "estimator": (str, "grmc"),
        "lambdas": (_list(float), [0.1, 0.5, 1.0]),
        "ks": (_list(int), [10, 100, 1000]),
        "seeds": (_list(int), [0, 1, 2, 3, 4]),
        "epochs": (int, 30),
        "warmup": (int, WARMUP_EPOCHS),
        "retrain_epochs": (int, 20),
        "hidden": (int, 16),
        "nodes": (int, 3),
        "n": (int, 2000),
        "weight_lr": (float, WEIGHT_LR),
        "arch_lr": (float, ARCH_LR),
    },
    "cost-probe": {
        "n": (_list(int), [1000, 2000, 4000]),
        "k": (_list(int), [100, 200, 400]),
        "classes": (int, 8),
        "lambda": (float, 0.1),
        "repeats": (int, 3),
    },
}


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def resolve(command: str, args: argparse.Namespace) -> dict:
    table = {**COMMON, **PARAMS[command]}
    resolved = {key: default for key, (_, default) in table.items()}
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in ("common", command):
            if parser.has_section(section):
                for key, raw in parser.items(section):
                    key = key.replace("-", "_")
                    if key not in table:
                        raise UsageError(f"unknown key {key!r} in section [{section}]")
                    resolved[key] = table[key][0](raw)
    for key, (conv, _) in table.items():
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = conv(value)
    return resolved


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _theta(seed: int, num_classes: int) -> np.ndarray:
    return derive_rng(seed, "theta", num_classes).normal(size=num_classes)


# -- estimator-bench -------------------------------------------------------------


def _bench_job(job):
    est, c, lam, k, trials, seed = job
    theta = _theta(seed, c)
    t0 = time.perf_counter()
    stats = estimator_bias_variance(est, theta, lam, k, QuadraticLoss.toward(0, c), trials,
                                    derive_seed(seed, "bench", c, lam))
    wall = (time.perf_counter() - t0) * 1e3
    return (est, c, lam, k, trials, stats.bias_norm, stats.variance, stats.mse, stats.ci_halfwidth, wall)


def cmd_estimator_bench(cfg: dict) -> int:
    ests = [e.lower() for e in cfg["estimators"]]
    bad = [e for e in ests if e not in ESTIMATORS]
    if bad or not ests:
        raise UsageError(f"unknown estimators {bad}")
    if cfg["trials"] < MIN_TRIALS:
        raise UsageError(f"--trials must be >= {MIN_TRIALS}")
    if any(c < 2 for c in cfg["classes"]) or any(k < 1 for k in cfg["k"]) or not cfg["classes"] or not cfg["k"]:
        raise UsageError("invalid class or K grid")
    for lam in cfg["lambda"]:
        _check_lambda(lam)
    jobs = set()
    for est in ests:
        for c in cfg["classes"]:
            for lam in cfg["lambda"]:
                for k in (cfg["k"] if est == "grmc" else [1]):
                    jobs.add((est, c, lam, k, cfg["trials"], cfg["seed"]))
    out = Path(cfg["out"])
    rows = _map(_bench_job, sorted(jobs), cfg["workers"])
    write_csv(out / "estimator_bench.csv", BENCH_COLUMNS, rows)
    return 0


def _check_lambda(lam: float) -> None:
    try:
        check_temperature(lam)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- temp-sweep ------------------------------------------------------------------


def _sweep_job(job):
    est, cfg = job
    theta = _theta(cfg["seed"], cfg["classes"])
    trials = cfg["grmc_trials"] if est == "grmc" else cfg["trials"]
    return temperature_sweep(est, theta, cfg["lambdas"], cfg["k"], QuadraticLoss.toward(0, cfg["classes"]),
                             trials, derive_seed(cfg["seed"], "sweep"), cfg["fit_max"])


def cmd_temp_sweep(cfg: dict) -> int:
    lams = cfg["lambdas"]
    if len(lams) < 4:
        raise UsageError("temperature grid needs at least 4 points")
    for lam in lams:
        if not lam > 0:
            raise UsageError(f"temperature {lam} is not strictly positive")
        _check_lambda(lam)
    ests = sorted(e.lower() for e in cfg["estimators"])
    if any(e not in ESTIMATORS for e in ests):
        raise UsageError(f"unknown estimators in {ests}")
    if min(lams) * 100 > max(lams) * (1 + 1e-9):
        raise UsageError("temperature grid must span at least two decades")
    out = Path(cfg["out"])
    results = _map(_sweep_job, [(e, cfg) for e in ests], cfg["workers"])
    rows = [(r.estimator, lam, var, r.slope)
            for r in results for lam, var in zip(r.lambdas, r.variances)]
    write_csv(out / "temp_sweep.csv", SWEEP_COLUMNS, rows)
    return 0


# -- search ----------------------------------------------------------------------


def _supernet_config(cfg: dict, seed: int, dims=(8, 8)) -> SupernetConfig:
    return SupernetConfig(
        modality_dims=tuple(dims), hidden_dim=cfg["hidden"], num_nodes=cfg["nodes"],
        estimator=cfg["estimator"], lam=cfg.get("lambda", 0.1), k=cfg.get("k", 1), seed=seed,
    )


def _trace_rows(trace: SearchTrace):
    return [tuple(getattr(r, c) for c in TRACE_COLUMNS) for r in trace.records]


def cmd_search(cfg: dict) -> int:
    if cfg["epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    _check_lambda(cfg["lambda"])
    try:
        net_cfg = _supernet_config(cfg, cfg["seed"], cfg["dims"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    dataset = make_synthetic_bimodal(cfg["seed"], n=cfg["n"], d1=cfg["dims"][0], d2=cfg["dims"][1])
    net = Supernet(net_cfg)
    controller = None
    if cfg["adaptive_target"] is not None:
        controller = AdaptiveK(cfg["adaptive_target"], cfg["k_min"], cfg["k_max"], cfg["window"])
    try:
        _, trace = search(net, dataset, cfg["epochs"], cfg["weight_lr"], cfg["arch_lr"],
                          controller=controller, warmup_epochs=cfg["warmup"])
    except DivergenceError as exc:
        write_csv(out / "trace.csv", TRACE_COLUMNS, _trace_rows(exc.trace or SearchTrace()))
        print(f"search diverged: {exc}", file=sys.stderr)
        return 1
    write_csv(out / "trace.csv", TRACE_COLUMNS, _trace_rows(trace))
    arch = net.derive({"lambda": net_cfg.lam, "K": net_cfg.k, "estimator": net_cfg.estimator, "seed": cfg["seed"]})
    (out / "arch.json").write_text(arch.to_json())
    (out / "arch.dot").write_text(arch.to_dot())
    try:
        acc = retrain_derived(arch, net_cfg, dataset, cfg["retrain_epochs"], cfg["weight_lr"])
    except DivergenceError as exc:
        print(f"retraining diverged: {exc}", file=sys.stderr)
        return 1
    print(f"relaxed val accuracy {trace.records[-1].val_acc:.4f}")
    print(f"retrain test accuracy {acc:.4f}")
    return 0


# -- ablate ------------------------------------------------------------------------


def cmd_ablate(cfg: dict) -> int:
    if not cfg["lambdas"] or not cfg["ks"] or not cfg["seeds"]:
        raise UsageError("ablation grids must be non-empty")
    for lam in cfg["lambdas"]:
        _check_lambda(lam)
    try:
        base = _supernet_config(cfg, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    cells = ablate(base, cfg["lambdas"], cfg["ks"], cfg["seeds"], master_seed=cfg["seed"],
                   epochs=cfg["epochs"], retrain_epochs=cfg["retrain_epochs"], n=cfg["n"],
                   workers=cfg["workers"], weight_lr=cfg["weight_lr"], arch_lr=cfg["arch_lr"],
                   warmup_epochs=cfg["warmup"])
    cell_dir = out / "cells"
    cell_dir.mkdir(exist_ok=True)
    for c in cells:
        if c.dot:
            (cell_dir / f"lambda{c.lam:g}_k{c.k}_seed{c.seed}.dot").write_text(c.dot)
    write_csv(out / "ablation.csv", ABLATE_COLUMNS,
              [(c.lam, c.k, c.seed, c.retrain_acc, c.var_alpha, c.wall_ms, c.failure) for c in cells])
    return 0


# -- cost-probe ------------------------------------------------------------------


def cmd_cost_probe(cfg: dict) -> int:
    if len(set(cfg["n"])) < 3 or len(set(cfg["k"])) < 3:
        raise UsageError("cost probe grids need at least 3 points each")
    if min(cfg["n"]) < 1 or min(cfg["k"]) < 1:
        raise UsageError("grid values must be positive")
    _check_lambda(cfg["lambda"])
    out = Path(cfg["out"])
    probe = cost_scaling_probe(cfg["n"], cfg["k"], cfg["classes"], cfg["lambda"], cfg["repeats"], cfg["seed"])
    write_csv(out / "cost_probe.csv", COST_COLUMNS,
              [(n, k, ms, probe.fit_c, probe.fit_r2) for n, k, ms in probe.rows])
    return 0


COMMANDS = {
    "estimator-bench": cmd_estimator_bench,
    "temp-sweep": cmd_temp_sweep,
    "search": cmd_search,
    "ablate": cmd_ablate,
    "cost-probe": cmd_cost_probe,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="master seed (default 0)")
    shared.add_argument("--out", help="output directory (default ./out)")
    shared.add_argument("--workers", type=int, help="worker processes (default 1)")
    shared.add_argument("--config", help="INI file with [common] and per-subcommand sections")

    parser = argparse.ArgumentParser(prog="gumbelnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in PARAMS.items():
        p = sub.add_parser(name, parents=[shared])
        for key, (conv, default) in params.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, help=f"default: {default}")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        _prepare_out(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as exc:
        print(f"gumbelnas {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
