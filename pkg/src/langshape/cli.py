"""Command-line entry point: ``langshape <command> [options]``.

Every command takes ``--config`` (YAML) and any number of
``--set dotted.key=value`` overrides, so each configuration default can be
changed from the command line.  Relative output directories are placed under
``$LANGSHAPE_OUTPUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from . import invariance, pipeline
from .dataset import ConfigurationError


def _apply_set(data: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigurationError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(args) -> config_mod.ExperimentConfig:
    data: dict = {}
    source = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        source = str(path)
    for item in args.set or []:
        _apply_set(data, item)
    if args.seed is not None:
        data["master_seed"] = args.seed
    if args.out_dir:
        data["output_dir"] = args.out_dir
    if args.workers:
        data["workers"] = args.workers
    if getattr(args, "layout", None):
        data["layouts"] = [str(Path(p).resolve()) for p in args.layout]
    return config_mod.from_dict(data, source)


def cmd_gen_data(cfg, args) -> int:
    summary = pipeline.gen_data(cfg)
    print(f"train layouts: {', '.join(summary['train_layouts'])}")
    print(f"validation layouts: {', '.join(summary['val_layouts'])}")
    print(f"clips: {summary['train_clips']} train / {summary['val_clips']} validation")
    print(f"descriptions per clip: {summary['descriptions_per_clip']}"
          f" ({summary['distinct_descriptions']} distinct)")
    print(f"labelled pairs: {summary['train_pairs']} train / {summary['val_pairs']} validation")
    print(f"written to {cfg.out / 'data'}")
    return 0


def cmd_train_learn(cfg, args) -> int:
    results = pipeline.train_learn(cfg, args.mode or None, data_dir=args.data, out=args.out)
    for mode, r in results.items():
        print(f"{mode}: best validation accuracy {r['val_accuracy']:.4f} at epoch {r['best_epoch']}"
              f" -> {r['checkpoint']}")
    return 0


def cmd_select(cfg, args) -> int:
    chosen = pipeline.select_hyperparams(cfg)
    for task, sid in chosen.items():
        print(f"{task:<24} {sid}")
    return 0


def cmd_run_experiment(cfg, args) -> int:
    records = pipeline.run_experiment(cfg)
    print(f"{len(records)} run records in {cfg.out / 'main'}")
    return 0


def cmd_analyze(cfg, args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else cfg.out / "main"
    rep = pipeline.analyze(run_dir, cfg.config_hash() if not args.run_dir else "")
    print(rep["summary"])
    return 0


def cmd_sensitivity(cfg, args) -> int:
    records = pipeline.sensitivity(cfg, args.noise_sigma)
    print(f"{len(records)} run records in {cfg.out / 'sensitivity'}")
    return 0


def cmd_verify_invariance(cfg, args) -> int:
    rows, dumps = invariance.verification_table(args.instances, args.potentials, args.seed or 0,
                                                max_states=args.max_states, max_actions=args.max_actions,
                                                max_horizon=args.max_horizon)
    out = Path(args.report_dir) if args.report_dir else cfg.out / "invariance"
    pipeline.write_csv(out / "verification.csv", rows, cfg.config_hash())
    mdp, bonus, H = invariance.action_bonus_counterexample()
    adv = invariance.verify_policy_invariance(mdp, None, H, shaping=bonus)
    dumps.append({"instance": "action_bonus", "expected": "fail", "passed": adv.passed,
                  "counterexample": adv.counterexample})
    pipeline.atomic_write_text(out / "counterexamples.json", json.dumps(dumps, indent=2) + "\n")
    n_pass = sum(r["passed"] for r in rows)
    print(f"{n_pass}/{len(rows)} potential-shaping instances pass")
    print(f"non-potential action bonus detected: {not adv.passed}")
    return 0 if n_pass == len(rows) and not adv.passed else 1


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate trajectories, clips, descriptions and labelled pairs"),
    "train-learn": (cmd_train_learn, "train one relatedness classifier per encoder mode"),
    "select-hyperparams": (cmd_select, "leave-one-task-out choice of encoder mode and lambda"),
    "run-experiment": (cmd_run_experiment, "ExtOnly and Ext+Lang runs on every test task"),
    "analyze": (cmd_analyze, "AUC / final-policy tests, correlations and confidence bands"),
    "sensitivity": (cmd_sensitivity, "Ext+Lang runs with Gaussian noise on the potential"),
    "verify-invariance": (cmd_verify_invariance, "exact optimal-policy check on random tabular MDPs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langshape", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. rl.n_seeds=3 (repeatable)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--workers", type=int, help="parallel worker processes for RL runs")
        p.add_argument("--layout", action="append", help="layout file (repeatable; replaces the shipped rooms)")
        if name == "train-learn":
            p.add_argument("--data", help="directory holding pairs_train.jsonl and pairs_val.jsonl")
            p.add_argument("--out", help="checkpoint path (single mode) or directory")
            p.add_argument("--mode", action="append", help="encoder mode (repeatable; default: config grid)")
        elif name == "analyze":
            p.add_argument("--run-dir", help="directory containing records.jsonl")
        elif name == "sensitivity":
            p.add_argument("--noise-sigma", type=float, nargs="+", help="noise standard deviations")
        elif name == "verify-invariance":
            p.add_argument("--instances", type=int, default=20, help="random MDPs")
            p.add_argument("--potentials", type=int, default=5, help="random potentials per MDP")
            p.add_argument("--max-states", type=int, default=6)
            p.add_argument("--max-actions", type=int, default=4)
            p.add_argument("--max-horizon", type=int, default=8)
            p.add_argument("--report-dir", help="where to write the table and counterexample dump")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        func = COMMANDS[args.command][0]
        return func(cfg, args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
