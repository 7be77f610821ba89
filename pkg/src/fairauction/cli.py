"""Experiment driver: train, evaluate, sweep, heatmap, baseline.

Every subcommand reads a YAML config, resolves it against the full
default grammar (unknown keys are an error, reported by dotted path),
and writes its artifacts into ``--out``.  The resolved config, the
effective seed, and a format-version marker are echoed into the
artifact directory, so a finished run can be reproduced from the
directory alone.  Nothing written here carries a timestamp: two runs
of the same resolved config produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import yaml

from .fairness import setting_fairness
from .model import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from .reporting import (
    emit_tables,
    evaluate,
    heatmap_csv,
    heatmap_sweep,
    report_csv,
    rows_to_csv,
)
from .trainer import TrainConfig, TrainingAborted, history_to_csv, train
from .valuations import itemwise_myerson_revenue, make_setting, myerson_reserve, rng_stream

__all__ = ["main", "load_config", "resolve_config", "ConfigError"]

logger = logging.getLogger(__name__)

REQUIRED = object()

# Full config grammar with defaults; None means "unset, use the
# computed default" (for example the per-setting hidden layer count).
CONFIG_GRAMMAR = {
    "setting": {
        "id": REQUIRED,
        "n": None,
        "m": None,
        "shift": 0.0,
    },
    "fairness": {
        "d": 1.0,
    },
    "train": {
        "epochs": 30,
        "train_samples": 65536,
        "batch_size": 128,
        "misreport_steps": 25,
        "misreport_rate": 0.1,
        "learning_rate": 1e-3,
        "q_regret": 100,
        "q_fairness": 100,
        "rho_every_epochs": 2,
        "rho_increment": 1.0,
        "lambda_regret_init": 5.0,
        "lambda_fairness_init": 5.0,
        "rho_regret_init": 1.0,
        "rho_fairness_init": 1.0,
        "hidden_layers": None,
        "hidden_width": 100,
        "holdout_samples": 4096,
    },
    "eval": {
        "n_samples": 10000,
        "misreport_steps": 1000,
        "restarts": 10,
        "regret_samples": 2000,
        "myerson_samples": 0,
    },
    "heatmap": {
        "step": None,
    },
    "sweep": {
        "d_values": [1.0, 0.75, 0.5, 0.25, 0.0],
        "shift_values": None,
    },
    "baseline": {
        "samples": 1000000,
    },
}

TOP_LEVEL_EXTRAS = ("seed", "format_version", "command")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def resolve_config(raw: dict) -> dict:
    """Fill defaults and reject unknown keys by dotted path."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in CONFIG_GRAMMAR and key not in TOP_LEVEL_EXTRAS:
            raise ConfigError(f"unknown config key: {key}")

    marker = raw.get("format_version")
    if marker is not None and marker != CHECKPOINT_MAGIC:
        raise ConfigError(f"unsupported format_version {marker!r}")

    out = {"seed": int(raw.get("seed", 0))}
    for section, grammar in CONFIG_GRAMMAR.items():
        given = raw.get(section, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"config key {section}: expected a mapping")
        for key in given:
            if key not in grammar:
                raise ConfigError(f"unknown config key: {section}.{key}")
        filled = {}
        for key, default in grammar.items():
            if key in given:
                filled[key] = given[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing config key: {section}.{key}")
            else:
                filled[key] = copy.deepcopy(default)
        out[section] = filled

    _check_values(out)
    return out


def _check_values(cfg: dict):
    sid = str(cfg["setting"]["id"]).upper()
    cfg["setting"]["id"] = sid
    if sid not in "ABCDEF" or len(sid) != 1:
        raise ConfigError(f"setting.id must be one of A-F, got {sid!r}")
    if sid == "C":
        if cfg["setting"]["n"] is None or cfg["setting"]["m"] is None:
            raise ConfigError("setting C needs setting.n and setting.m")
    elif cfg["setting"]["n"] is not None or cfg["setting"]["m"] is not None:
        raise ConfigError(f"setting.n and setting.m are fixed for setting {sid}")
    if cfg["setting"]["shift"] and sid not in ("D", "E", "F"):
        raise ConfigError("setting.shift only applies to settings D-F")

    d = cfg["fairness"]["d"]
    if not isinstance(d, (int, float)) or not 0.0 <= float(d) <= 1.0:
        raise ConfigError(f"fairness.d: d outside [0,1], got {d!r}")
    cfg["fairness"]["d"] = float(d)

    for d in cfg["sweep"]["d_values"]:
        if not isinstance(d, (int, float)) or not 0.0 <= float(d) <= 1.0:
            raise ConfigError(f"sweep.d_values: d outside [0,1], got {d!r}")
    if len(set(cfg["sweep"]["d_values"])) != len(cfg["sweep"]["d_values"]):
        raise ConfigError("sweep.d_values: duplicate entries")
    shifts = cfg["sweep"]["shift_values"]
    if shifts is not None:
        if sid not in ("D", "E", "F"):
            raise ConfigError("sweep.shift_values only applies to settings D-F")
        if len(set(shifts)) != len(shifts):
            raise ConfigError("sweep.shift_values: duplicate entries")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is None:
        raise ConfigError(f"{path}: empty config")
    return resolve_config(raw)


def _setting_from(cfg: dict, shift=None):
    s = cfg["setting"]
    return make_setting(s["id"], n=s["n"], m=s["m"],
                        shift=s["shift"] if shift is None else shift)


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(seed=cfg["seed"], **cfg["train"])
    tc.validate()
    return tc


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def _echo_config(cfg: dict, out_dir: str, command: str):
    echo = {"format_version": CHECKPOINT_MAGIC, "command": command}
    echo.update(cfg)
    _write(os.path.join(out_dir, "resolved_config.yaml"),
           yaml.safe_dump(echo, sort_keys=True))


def _load_model_for(cfg: dict, checkpoint: str | None, setting):
    if not checkpoint:
        raise ConfigError("this subcommand needs --checkpoint")
    model = load_checkpoint(checkpoint)
    if (model.bidder_type, model.n, model.m) != \
            (setting.bidder_type, setting.n, setting.m):
        raise ConfigError(
            f"bidder_type mismatch: checkpoint holds {model.bidder_type} "
            f"{model.n}x{model.m}, config asks for {setting.bidder_type} "
            f"{setting.n}x{setting.m}")
    return model


def _run_training(cfg: dict, setting, out_dir: str):
    fspec = setting_fairness(setting, d=cfg["fairness"]["d"])
    result = train(_train_config(cfg), setting, fspec)
    save_checkpoint(result.model, os.path.join(out_dir, "checkpoint.txt"))
    _write(os.path.join(out_dir, "history.csv"),
           history_to_csv(result.history))
    _write(os.path.join(out_dir, "holdout.csv"), rows_to_csv(
        ["epoch", "holdout_revenue", "holdout_unfairness",
         "train_unfairness"], result.holdout_history))
    return result


def _run_eval(cfg: dict, model, setting, out_dir: str):
    fspec = setting_fairness(setting, d=cfg["fairness"]["d"])
    ev = cfg["eval"]
    report = evaluate(
        model, setting, fspec, n_samples=ev["n_samples"], seed=cfg["seed"],
        misreport_steps=ev["misreport_steps"], restarts=ev["restarts"],
        regret_samples=ev["regret_samples"],
        myerson_samples=ev["myerson_samples"], d=cfg["fairness"]["d"])
    _write(os.path.join(out_dir, "eval.json"),
           json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(os.path.join(out_dir, "eval.csv"), report_csv(report))
    return report


def cmd_train(cfg: dict, args) -> int:
    setting = _setting_from(cfg)
    _run_training(cfg, setting, args.out)
    logger.info("wrote checkpoint and history to %s", args.out)
    return 0


def cmd_evaluate(cfg: dict, args) -> int:
    setting = _setting_from(cfg)
    model = _load_model_for(cfg, args.checkpoint, setting)
    report = _run_eval(cfg, model, setting, args.out)
    logger.info("revenue %.4f, regret %.5f, unfairness %.5f",
                report.revenue_mean, report.regret_mean,
                report.unfairness_mean)
    return 0


def cmd_heatmap(cfg: dict, args) -> int:
    setting = _setting_from(cfg)
    model = _load_model_for(cfg, args.checkpoint, setting)
    points, zs = heatmap_sweep(model, setting, step=cfg["heatmap"]["step"])
    _write(os.path.join(args.out, "heatmap.csv"), heatmap_csv(points, zs))
    logger.info("wrote %d grid points to %s", len(points), args.out)
    return 0


def cmd_sweep(cfg: dict, args) -> int:
    shifts = cfg["sweep"]["shift_values"]
    shifts = [None] if shifts is None else list(shifts)
    reports = []
    for shift in shifts:
        setting = _setting_from(cfg, shift=shift)
        for d in cfg["sweep"]["d_values"]:
            cell = dict(cfg)
            cell["fairness"] = {"d": float(d)}
            name = f"d_{d:.2f}" if shift is None else f"b_{shift:.2f}_d_{d:.2f}"
            cell_dir = os.path.join(args.out, name)
            os.makedirs(cell_dir, exist_ok=True)
            logger.info("sweep cell %s: training", name)
            result = _run_training(cell, setting, cell_dir)
            reports.append(_run_eval(cell, result.model, setting, cell_dir))
    tables_dir = os.path.join(args.out, "tables")
    os.makedirs(tables_dir, exist_ok=True)
    layout = "bd" if len(shifts) > 1 else "d"
    _write(os.path.join(tables_dir, "revenue.csv"),
           emit_tables(reports, layout=layout))
    logger.info("wrote %d cells and revenue table to %s",
                len(reports), args.out)
    return 0


def cmd_baseline(cfg: dict, args) -> int:
    setting = _setting_from(cfg)
    samples = int(cfg["baseline"]["samples"])
    mean, stderr = itemwise_myerson_revenue(
        setting, samples, rng_stream(cfg["seed"], "baseline"))
    payload = {
        "setting_id": setting.setting_id,
        "bidder_type": setting.bidder_type,
        "n": setting.n,
        "m": setting.m,
        "samples": samples,
        "revenue_mean": float(mean),
        "revenue_stderr": float(stderr),
        "reserves": [float(myerson_reserve(float(lo), float(hi)))
                     for lo, hi in zip(setting.low, setting.high)],
    }
    _write(os.path.join(args.out, "baseline.json"),
           json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("itemwise posted-price baseline: %.4f (stderr %.2g)",
                mean, stderr)
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "baseline": cmd_baseline,
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; exit 2 is reserved for aborted training
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fairauction",
        description="Learn revenue-maximizing auctions under strategyproofness "
                    "and allocation-fairness constraints.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("train", "train one mechanism and save its checkpoint"),
            ("evaluate", "score a checkpoint on held-out valuations"),
            ("sweep", "train and evaluate one cell per fairness distance"),
            ("heatmap", "dense allocation grid for a 1-bidder, 2-item model"),
            ("baseline", "itemwise posted-price revenue for the setting")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name in ("evaluate", "heatmap"):
            p.add_argument("--checkpoint", required=False,
                           help="trained model to load")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        os.makedirs(args.out, exist_ok=True)
        _echo_config(cfg, args.out, args.command)
        return COMMANDS[args.command](cfg, args)
    except TrainingAborted as exc:
        sys.stderr.write(f"fairauction: training aborted: {exc}\n")
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        sys.stderr.write(f"fairauction: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
