"""Command-line harness: ``resist run|compare|sweep <config.json>`` and ``resist fit <metrics.csv>``.

A config is one JSON document::

    {
      "model":    {"depth_H": 6, "width_m": 64, ...},        # ModelConfig fields
      "protocol": {"method": "resist", "S": 2, "T": 50, ...}, # ProtocolConfig fields
      "data":     {"source": "synthetic", "n": 16, "d": 8, "seed": 0},
      "eval_data": {...},                                      # optional, same shape as data
      "methods":  ["resist", "local_sgd"],                     # compare only
      "ells":     [1, 5, 50],                                  # sweep only
      "output":   {"metrics": "metrics.csv", "checkpoint": "model.ckpt"}
    }

Unknown keys are rejected. Relative output and data paths resolve against
the directory holding the config file. ``model.input_dim_d`` defaults to the
data dimension.

Exit codes: 0 ok, 2 invalid config, 3 divergence, 4 I/O or unreadable data.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import checkpoint
from .comm import Codec
from .data import DataError, Dataset, gen_synthetic, load_csv
from .protocol import METHODS, DivergenceError, ProtocolConfig, RunResult, run, sweep_local_iterations
from .resnet import ModelConfig

log = logging.getLogger("resist")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

METRIC_COLUMNS = ("round", "train_loss", "eval_loss", "shared_bytes", "partitioned_bytes",
                  "cumulative_bytes", "seconds")
COMPARE_COLUMNS = ("method", "round", "loss", "cumulative_bytes", "seconds")
SWEEP_COLUMNS = ("ell", "final_train_loss", "final_eval_loss", "cumulative_bytes")

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_DATA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "source": {"const": "synthetic"},
                "n": _pos_int,
                "d": _pos_int,
                "seed": _nonneg_int,
                "label_mode": {"enum": ["teacher_net", "random_bounded"]},
            },
            "required": ["source", "n", "d"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "source": {"const": "csv"},
                "path": {"type": "string"},
                "policy": {"enum": ["normalize", "reject"]},
                "y_max": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["source", "path"],
            "additionalProperties": False,
        },
    ]
}
_PROTOCOL_FIELDS = {
    "method": {"enum": list(METHODS)},
    "S": _pos_int,
    "T": _nonneg_int,
    "ell": _pos_int,
    "eta": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": {"oneOf": [_pos_int, {"const": "full"}]},
    "warmup_rounds": _nonneg_int,
    "shard_mode": {"enum": ["full_data", "disjoint_shards"]},
    "seed": _nonneg_int,
    "compression": {
        "oneOf": [
            {"type": "null"},
            {
                "type": "object",
                "properties": {
                    "kind": {"enum": ["quantize", "topk"]},
                    "bits": {"type": "integer", "minimum": 1, "maximum": 16},
                    "frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                },
                "required": ["kind"],
                "additionalProperties": False,
            },
        ]
    },
    "delta_encoding": {"type": "boolean"},
    "clock": {"enum": ["simulated", "wall"]},
    "flops_per_second": {"type": "number", "exclusiveMinimum": 0},
    "bytes_per_second": {"type": "number", "exclusiveMinimum": 0},
}
CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "depth_H": _pos_int,
                "width_m": _pos_int,
                "input_dim_d": _pos_int,
                "c_res": {"type": "number"},
                "c_sigma": {"type": "number", "exclusiveMinimum": 0},
                "activation": {"enum": ["relu", "identity"]},
                "partition_lo": _pos_int,
                "partition_hi": _pos_int,
                "min_depth": _pos_int,
            },
            "required": ["depth_H", "width_m"],
            "additionalProperties": False,
        },
        "protocol": {
            "type": "object",
            "properties": _PROTOCOL_FIELDS,
            "required": ["method", "S", "T"],
            "additionalProperties": False,
        },
        "data": _DATA,
        "eval_data": _DATA,
        "methods": {
            "type": "array",
            "items": {
                "oneOf": [
                    {"enum": list(METHODS)},
                    {
                        "type": "object",
                        "properties": _PROTOCOL_FIELDS,
                        "required": ["method"],
                        "additionalProperties": False,
                    },
                ]
            },
        },
        "ells": {"type": "array", "items": _pos_int},
        "output": {
            "type": "object",
            "properties": {k: {"type": "string"} for k in ("metrics", "checkpoint", "compare", "sweep")},
            "additionalProperties": False,
        },
    },
    "required": ["model", "protocol", "data"],
    "additionalProperties": False,
}
DEFAULT_OUTPUT = {"metrics": "metrics.csv", "checkpoint": "model.ckpt", "compare": "compare.csv",
                  "sweep": "sweep.csv"}


class UsageError(ValueError):
    """Config is well-formed JSON but describes an impossible experiment."""


class Experiment:
    """A validated config with data loaded and paths resolved."""

    def __init__(self, doc: dict, base_dir: Path):
        jsonschema.validate(doc, CONFIG_SCHEMA)
        self.doc = doc
        self.base_dir = base_dir
        self.data = self._load(doc["data"])
        self.eval_data = self._load(doc["eval_data"]) if "eval_data" in doc else None
        model = dict(doc["model"])
        model.setdefault("input_dim_d", self.data.d)
        if model["input_dim_d"] != self.data.d:
            raise UsageError(f"model.input_dim_d={model['input_dim_d']} but data has d={self.data.d}")
        if self.eval_data is not None and self.eval_data.d != self.data.d:
            raise UsageError("eval_data dimension differs from data")
        self.cfg = ModelConfig(**model)
        self.protocol = protocol_config(doc["protocol"])
        out = dict(DEFAULT_OUTPUT, **doc.get("output", {}))
        self.output = {k: self._path(v) for k, v in out.items()}

    def _path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def _load(self, spec: dict) -> Dataset:
        if spec["source"] == "synthetic":
            return gen_synthetic(spec["n"], spec["d"], spec.get("seed", 0), spec.get("label_mode", "teacher_net"))
        return load_csv(self._path(spec["path"]), spec.get("policy", "normalize"), spec.get("y_max", 1.0))

    def run(self, pcfg: Optional[ProtocolConfig] = None) -> RunResult:
        return run(pcfg or self.protocol, self.cfg, self.data, self.eval_data)


def protocol_config(fields: dict) -> ProtocolConfig:
    fields = dict(fields)
    comp = fields.pop("compression", None)
    if comp is not None:
        fields["compression"] = Codec(**comp)
    return ProtocolConfig(**fields)


def load_experiment(config_path) -> Experiment:
    path = Path(config_path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    return Experiment(doc, path.parent)


def _fmt(v) -> str:
    # repr of a Python float is the shortest round-trip form and never locale-dependent
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def metrics_rows(result: RunResult) -> list[tuple]:
    return [(r.round, r.train_loss, r.eval_loss, r.shared_bytes, r.partitioned_bytes, r.cumulative_bytes,
             r.seconds) for r in result.rounds]


def member_paths(path: Path, count: int) -> list[Path]:
    return [path.with_name(f"{path.stem}.member{v}{path.suffix}") for v in range(count)]


def save_checkpoints(result: RunResult, exp: Experiment) -> list[Path]:
    path = exp.output["checkpoint"]
    path.parent.mkdir(parents=True, exist_ok=True)
    if result.params is not None:
        checkpoint.save(path, result.params, exp.cfg)
        return [path]
    paths = member_paths(path, len(result.models))
    for p, model in zip(paths, result.models):
        checkpoint.save(p, model.params, exp.cfg)
    return paths


def cmd_run(config_path) -> int:
    exp = load_experiment(config_path)
    result = exp.run()
    write_csv(exp.output["metrics"], METRIC_COLUMNS, metrics_rows(result))
    for p in save_checkpoints(result, exp):
        log.info("wrote %s", p)
    print(f"method={result.method} final_loss={_fmt(result.final_loss)} "
          f"cumulative_gb={result.ledger.cumulative / 1e9:.6f} wall_seconds={result.wall_seconds:.2f}")
    return EXIT_OK


def compare_configs(exp: Experiment) -> list[ProtocolConfig]:
    methods = exp.doc.get("methods", [])
    if len(methods) < 2:
        raise UsageError(f"compare needs at least 2 methods, got {len(methods)}")
    base = dict(exp.doc["protocol"])
    out = []
    for entry in methods:
        fields = dict(base, **(entry if isinstance(entry, dict) else {"method": entry}))
        out.append(protocol_config(fields))
    return out


def cmd_compare(config_path) -> int:
    exp = load_experiment(config_path)
    rows = []
    for pcfg in compare_configs(exp):
        result = exp.run(pcfg)
        log.info("%s done: final loss %r", pcfg.method, result.final_loss)
        rows += [(pcfg.method, r.round, r.train_loss, r.cumulative_bytes, r.seconds) for r in result.rounds]
        print(f"method={pcfg.method} final_loss={_fmt(result.final_loss)} "
              f"cumulative_gb={result.ledger.cumulative / 1e9:.6f} wall_seconds={result.wall_seconds:.2f}")
    write_csv(exp.output["compare"], COMPARE_COLUMNS, rows)
    return EXIT_OK


def cmd_sweep(config_path) -> int:
    exp = load_experiment(config_path)
    ells = exp.doc.get("ells")
    if not ells:
        raise UsageError("sweep needs a non-empty 'ells' list")
    rows = sweep_local_iterations(exp.protocol, exp.cfg, exp.data, ells, exp.eval_data)
    write_csv(exp.output["sweep"], SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    for r in rows:
        print(f"ell={r['ell']} final_loss={_fmt(r['final_train_loss'])} cumulative_bytes={r['cumulative_bytes']}")
    return EXIT_OK


def decreasing_suffix(losses: Sequence[float]) -> int:
    """Start index of the longest strictly decreasing tail of ``losses``."""
    start = len(losses) - 1
    while start > 0 and losses[start - 1] > losses[start]:
        start -= 1
    return start


def fit_rate(losses: Sequence[float], rounds: Optional[Sequence[int]] = None, min_points: int = 5) -> tuple[float, float]:
    """Fit ``log L(t) = b + t log(rho)`` on the longest strictly decreasing tail.

    Returns ``(rho, r2)``. Raises ValueError if the tail has fewer than
    ``min_points`` entries or contains a non-positive loss.
    """
    L = np.asarray(losses, dtype=np.float64)
    t = np.arange(L.size, dtype=np.float64) if rounds is None else np.asarray(rounds, dtype=np.float64)
    if L.size == 0:
        raise ValueError("no losses to fit")
    start = decreasing_suffix(L)
    L, t = L[start:], t[start:]
    if np.any(~(L > 0)):
        raise ValueError("non-positive or NaN loss in the fit window")
    if L.size < min_points:
        raise ValueError(f"decreasing tail has {L.size} points, need at least {min_points}")
    logL = np.log(L)
    slope, intercept = np.polyfit(t, logL, 1)
    resid = logL - (intercept + slope * t)
    total = logL - logL.mean()
    ss_tot = float(np.dot(total, total))
    r2 = 1.0 - float(np.dot(resid, resid)) / ss_tot if ss_tot > 0 else 1.0
    return math.exp(slope), r2


def read_metrics(path) -> tuple[list[int], list[float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "train_loss" not in reader.fieldnames:
            raise DataError(f"{path}: no train_loss column")
        rows = list(reader)
    try:
        return [int(r["round"]) for r in rows], [float(r["train_loss"]) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed metrics row ({exc})") from exc


def cmd_fit(metrics_path) -> int:
    rounds, losses = read_metrics(metrics_path)
    try:
        rho, r2 = fit_rate(losses, rounds)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"rho={_fmt(rho)} r2={_fmt(r2)}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep, "fit": cmd_fit}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resist", description="Simulate distributed ResNet training by block partitioning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, target in (("run", "config.json"), ("compare", "config.json"), ("sweep", "config.json"),
                         ("fit", "metrics.csv")):
        sub.add_parser(name).add_argument("path", metavar=target)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args.path)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        print(f"error: invalid config at {path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # UsageError, ConfigError and field checks in the config dataclasses
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
