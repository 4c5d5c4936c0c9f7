"""Command-line experiment runner.

Usage::

    mslcl run --config exp.yaml [--seed N] [--method NAME] [--held-out K]
              [--out DIR] [--jobs J] [--gamma 0.5 ...]

The config file is a flat YAML mapping; every key can also be passed as a
flag (``held_out`` -> ``--held-out``), and flags win. ``method``,
``held_out`` and ``seed`` accept a single value or a list, and the runner
executes every combination. ``held_out: all`` holds out each domain in turn.

Exit codes: 0 success, 1 runtime failure, 2 configuration or data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .autodiff import ConfigError
from .data import (
    MEMORY_MODES,
    DataError,
    SyntheticConfig,
    generate_synthetic,
    leave_one_domain_out,
    load_features_table,
    split_tasks,
)
from .trainer import METHODS, TrainConfig, run_experiment

log = logging.getLogger("mslcl")

REPORT_VERSION = 1
OUT_ENV = "MSLCL_OUT"


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot, like 1e-3."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)
STRING_KEYS = {"data", "out", "memory_mode", "activation", "expansion_init", "bias_init"}


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _opt_int(v):
    return v is None or _int(v)


def _opt_str(v):
    return v is None or isinstance(v, str)


def _int_list(v):
    return isinstance(v, list) and all(_int(x) for x in v)


# key -> (default, checker, expected-type description)
SCHEMA = {
    "data": (None, _opt_str, "a file path"),
    "num_classes": (10, _int, "an integer"),
    "m_domains": (4, _int, "an integer"),
    "d": (20, _int, "an integer"),
    "per_cell_count": (50, _int, "an integer"),
    "shift_strength": (0.5, _num, "a number"),
    "noise_sigma": (0.3, _num, "a number"),
    "data_seed": (None, _opt_int, "an integer"),
    "num_tasks": (5, _int, "an integer"),
    "method": ("msl_mov", None, "a method name or list of names"),
    "held_out": ("all", None, "a domain id, a list of ids, or 'all'"),
    "seed": (0, None, "an integer or list of integers"),
    "epochs_per_domain": (20, _int, "an integer"),
    "batch_size": (32, _int, "an integer"),
    "learning_rate": (1e-3, _num, "a number"),
    "lambda": (1e-3, _num, "a number"),
    "tau": (2.0, _num, "a number"),
    "gamma": (0.96, _num, "a number"),
    "repetitions": (5, _int, "an integer"),
    "memory_capacity": (5, _int, "an integer"),
    "memory_mode": ("per_domain", lambda v: v in MEMORY_MODES, f"one of {list(MEMORY_MODES)}"),
    "rank": (None, _opt_int, "an integer"),
    "hidden_dims": ([64], _int_list, "a list of integers"),
    "feature_dim": (32, _int, "an integer"),
    "activation": ("relu", lambda v: v in ("relu", "tanh"), "'relu' or 'tanh'"),
    "expansion_init": ("uniform", lambda v: v in ("uniform", "zero"), "'uniform' or 'zero'"),
    "bias_init": ("zero", lambda v: v in ("zero", "class_mean"), "'zero' or 'class_mean'"),
    "out": (None, _opt_str, "a directory path"),
    "jobs": (1, _int, "an integer"),
}


def _as_list(key, value, item_ok, what):
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError(f"config key '{key}': empty list")
    for i, v in enumerate(items):
        if not item_ok(v):
            raise ConfigError(f"config key '{key}[{i}]': expected {what}, got {v!r}")
    return items


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def methods(self) -> list:
        return self.values["method"]

    @property
    def seeds(self) -> list:
        return self.values["seed"]

    def out_dir(self) -> Path:
        return Path(self.values["out"] or os.environ.get(OUT_ENV) or "runs")

    def synthetic(self, seed: int) -> SyntheticConfig:
        v = self.values
        data_seed = seed if v["data_seed"] is None else v["data_seed"]
        return SyntheticConfig(
            num_classes=v["num_classes"], m_domains=v["m_domains"], d=v["d"],
            per_cell_count=v["per_cell_count"], shift_strength=float(v["shift_strength"]),
            noise_sigma=float(v["noise_sigma"]), seed=data_seed,
        )

    def train_config(self, method: str, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig.for_method(
            method,
            epochs_per_domain=v["epochs_per_domain"], batch_size=v["batch_size"],
            learning_rate=float(v["learning_rate"]), lam=float(v["lambda"]), tau=float(v["tau"]),
            gamma=float(v["gamma"]), seed=seed, repetitions=v["repetitions"],
            memory_capacity=v["memory_capacity"], memory_mode=v["memory_mode"], rank=v["rank"],
            hidden_dims=tuple(v["hidden_dims"]), feature_dim=v["feature_dim"],
            activation=v["activation"], expansion_init=v["expansion_init"], bias_init=v["bias_init"],
        )


def parse_config(path, flag_overrides: Optional[dict] = None) -> ExperimentConfig:
    """Merge defaults, the YAML file at ``path`` (if any) and flag overrides."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            loaded = yaml.load(text, Loader=_Loader)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must be a key-value mapping")
        raw.update(loaded)
    raw.update(flag_overrides or {})

    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(map(str, unknown))}")

    values = {k: raw.get(k, default) for k, (default, _, _) in SCHEMA.items()}
    for key, (_, check, what) in SCHEMA.items():
        if check is not None and not check(values[key]):
            raise ConfigError(f"config key '{key}': expected {what}, got {values[key]!r}")

    values["method"] = _as_list("method", values["method"], lambda m: m in METHODS,
                                f"one of {', '.join(METHODS)}")
    values["seed"] = _as_list("seed", values["seed"], lambda s: _int(s) and s >= 0, "a nonnegative integer")
    if values["held_out"] != "all":
        values["held_out"] = _as_list("held_out", values["held_out"], lambda k: _int(k) and k >= 0,
                                      "a domain id or 'all'")
    if values["jobs"] < 1:
        raise ConfigError(f"config key 'jobs': expected a positive integer, got {values['jobs']}")
    cfg = ExperimentConfig(values)
    for m in cfg.methods:
        cfg.train_config(m, 0).validate()
    if values["data"] is None:
        cfg.synthetic(0).validate()
    return cfg


def load_pool(cfg: ExperimentConfig, seed: int):
    if cfg["data"] is not None:
        return load_features_table(cfg["data"])
    return generate_synthetic(cfg.synthetic(seed))


def run_cell(cfg: ExperimentConfig, method: str, held_out: int, seed: int) -> dict:
    """One isolated experiment: a method, a held-out domain and a seed."""
    pool = load_pool(cfg, seed)
    ds = leave_one_domain_out(pool, held_out)
    stream = split_tasks(ds, cfg["num_tasks"], seed)
    train_cfg = cfg.train_config(method, seed)
    report = run_experiment(ds, stream, train_cfg).to_dict()
    wall = report.pop("wall_clock_seconds")
    return {
        "format_version": REPORT_VERSION,
        "method": method,
        "held_out": held_out,
        "seed": seed,
        "seed_provenance": {
            "experiment_seed": seed,
            "data_seed": None if cfg["data"] else (seed if cfg["data_seed"] is None else cfg["data_seed"]),
            "task_split_seed": seed,
            "derivation": "numpy SeedSequence/default_rng over (seed, repetition, task, purpose)",
        },
        "experiment_config": {k: v for k, v in cfg.values.items() if k not in ("out", "jobs")},
        **report,
        "timing": {"wall_clock_seconds": wall},
    }


def _cell_job(args):
    values, method, held_out, seed = args
    try:
        return run_cell(ExperimentConfig(values), method, held_out, seed), None
    except Exception:  # reported per cell, the grid keeps going
        return None, traceback.format_exc()


def report_body(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def summary_table(cfg: ExperimentConfig, held: list, results: dict) -> tuple:
    """(csv text, printable text) with methods as rows and held-out domains as columns."""
    header = ["method"] + [f"held_out_{k}" for k in held] + ["mean"]
    rows = []
    for m in cfg.methods:
        row, vals = [m], []
        for k in held:
            cell = [results.get((m, k, s)) for s in cfg.seeds]
            if any(c is None for c in cell):
                row.append("FAILED")
                continue
            acc = sum(c["averaged"]["unseen"]["A"] for c in cell) / len(cell)
            vals.append(acc)
            row.append(_fmt(acc))
        row.append(_fmt(sum(vals) / len(vals)) if len(vals) == len(held) else "FAILED")
        rows.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    text = "\n".join("  ".join(str(c).ljust(wd) for c, wd in zip(r, widths)) for r in [header] + rows)
    return buf.getvalue(), "unseen-domain average accuracy\n" + text


def cells_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "held_out", "seed", "unseen_A", "unseen_BW", "seen_A", "seen_BW"])
    for (m, k, s), rep in results.items():
        if rep is None:
            w.writerow([m, k, s, "FAILED", "FAILED", "FAILED", "FAILED"])
            continue
        a = rep["averaged"]
        w.writerow([m, k, s, repr(a["unseen"]["A"]), repr(a["unseen"]["BW"]), repr(a["seen"]["A"]), repr(a["seen"]["BW"])])
    return buf.getvalue()


def run(cfg: ExperimentConfig) -> int:
    """Execute the grid and write reports; returns the process exit code."""
    try:
        pool = load_pool(cfg, cfg.seeds[0])
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    held = list(range(pool.num_domains)) if cfg["held_out"] == "all" else cfg["held_out"]
    bad = [k for k in held if k >= pool.num_domains]
    if bad:
        print(f"error: config key 'held_out': domains {bad} do not exist (have {pool.num_domains})", file=sys.stderr)
        return 2
    if cfg["num_tasks"] > pool.num_classes:
        print(f"error: config key 'num_tasks': {cfg['num_tasks']} tasks for {pool.num_classes} classes", file=sys.stderr)
        return 2

    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    cells = [(m, k, s) for m in cfg.methods for k in held for s in cfg.seeds]
    jobs = [(cfg.values, m, k, s) for m, k, s in cells]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as ex:
            outcomes = list(ex.map(_cell_job, jobs))
    else:
        outcomes = [_cell_job(j) for j in jobs]

    results, failed = {}, 0
    for (m, k, s), (report, err) in zip(cells, outcomes):
        stem = f"report__{m}__heldout{k}__seed{s}"
        if report is None:
            failed += 1
            results[(m, k, s)] = None
            (out / f"{stem}.FAILED.txt").write_text(err, encoding="utf-8")
            print(f"cell {m} held_out={k} seed={s} FAILED:\n{err}", file=sys.stderr)
            continue
        results[(m, k, s)] = report
        (out / f"{stem}.json").write_text(report_body(report), encoding="utf-8")

    summary, text = summary_table(cfg, held, results)
    (out / "summary.csv").write_text(summary, encoding="utf-8")
    (out / "cells.csv").write_text(cells_csv(results), encoding="utf-8")
    print(text)
    if failed:
        print(f"{failed} of {len(cells)} cells failed; see *.FAILED.txt in {out}", file=sys.stderr)
        return 1
    return 0


def _flag_value(text: str):
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mslcl", description="Cross-domain continual learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--config", default=None, help="YAML config file (defaults apply when omitted)")
    p.add_argument("-v", "--verbose", action="store_true")
    for key, (default, _, what) in SCHEMA.items():
        names = {f"--{key.replace('_', '-')}", f"--{key}"}
        p.add_argument(*sorted(names), dest=f"opt_{key}", type=str if key in STRING_KEYS else _flag_value, default=argparse.SUPPRESS,
                       metavar=key.upper(), help=f"{what} (default: {default!r})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_")}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
