"""Command-line entry point: ``toolseg <command> [--config FILE] [--set key=value ...]``.

Relative paths are resolved against ``--output-root``, else the
``TOOLSEG_OUTPUT_ROOT`` environment variable, else the working directory.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .errors import ToolsegError
from .evaluation import evaluate
from .experiments import PRESETS, run_ablation_preset, write_report
from .perturb import Scheme
from .preview import perturb_preview
from .synthdata import REAL_L, REAL_UL, SIM, DatasetReader, build_dataset
from .trainer import TrainConfig, run_experiment

ENV_ROOT = "TOOLSEG_OUTPUT_ROOT"

DEFAULTS = {
    "data": {"dir": "data", "n_sim": 400, "n_real": 572, "seed": 0, "height": 128, "width": 128,
             "real_train_fraction": 0.7, "workers": 1},
    "experiments_dir": "experiments",
    "train": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, expr: str) -> dict:
    """``a.b.c=value``; the value is parsed as YAML (so ``[8,16]`` is a list)."""
    if "=" not in expr:
        raise ToolsegError(f"override {expr!r} is not key=value")
    key, raw = expr.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ToolsegError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ToolsegError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    for expr in overrides:
        apply_override(cfg, expr)
    return cfg


def _root(args) -> Path:
    return Path(args.output_root or os.environ.get(ENV_ROOT) or ".")


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else _root(args) / p


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def _reader(args, cfg) -> DatasetReader:
    return DatasetReader(_path(args, cfg["data"]["dir"]))


def cmd_generate_data(args, cfg) -> None:
    d = cfg["data"]
    m = build_dataset(d["n_sim"], d["n_real"], d["seed"], _path(args, d["dir"]), height=d["height"],
                      width=d["width"], real_train_fraction=d["real_train_fraction"], workers=d["workers"])
    counts = m.counts()
    print("split,count")
    for split in (SIM, REAL_UL, REAL_L):
        print(f"{split},{counts.get(split, 0)}")


def cmd_train(args, cfg) -> None:
    tcfg = _train_cfg(cfg)
    out = _path(args, cfg["experiments_dir"])
    rep = run_experiment(tcfg, _reader(args, cfg), out, reuse=not args.no_reuse)
    print("seed,final_test_dice,checkpoint")
    for r in rep.runs:
        print(f"{r['seed']},{r['final_test_dice']:.6f},{out / r['checkpoint']}")
    print(f"mean,{rep.mean:.6f},std,{rep.std:.6f}")


def cmd_evaluate(args, cfg) -> None:
    rep = evaluate(_path(args, args.checkpoint), _reader(args, cfg), args.split, audit=args.audit)
    if args.out:
        rep.write(_path(args, args.out))
    print("id,dice")
    for i, v in zip(rep.ids, rep.per_image):
        print(f"{i},{v:.6f}")
    print(f"mean,{rep.mean:.6f}")
    print(f"std,{rep.std:.6f}")


def cmd_ablation(args, cfg) -> None:
    table = run_ablation_preset(args.preset, _train_cfg(cfg), _reader(args, cfg),
                                _path(args, cfg["experiments_dir"]), reuse=not args.no_reuse)
    sys.stdout.write(table.to_csv())
    for check in table.orderings:
        print(check.describe(), file=sys.stderr if not check.passed else sys.stdout)


def cmd_perturb_preview(args, cfg) -> None:
    res = perturb_preview(_path(args, args.image), args.scheme, args.n, _path(args, args.out),
                          seed=args.seed, geom=args.geom)
    print("seed,ops")
    for t in res["tiles"]:
        print(f"{t['seed']},{'+'.join(t['ops']) or 'none'}")
    print(f"grid,{res['grid']}")
    print(f"figure,{res['figure']}")


def cmd_report(args, cfg) -> None:
    paths = write_report(_path(args, cfg["experiments_dir"]))
    sys.stdout.write(paths["csv"].read_text())
    for k in sorted(paths):
        print(f"# {k}: {paths[k]}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--output-root", help=f"base for relative paths (default ${ENV_ROOT} or cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="toolseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="render the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one config over its seeds")
    t.add_argument("--no-reuse", action="store_true", help="retrain even if finished runs exist")
    e = sub.add_parser("evaluate", parents=[common], help="per-image Dice of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default=REAL_L, choices=[SIM, REAL_UL, REAL_L])
    e.add_argument("--audit", action="store_true", help="allow reading unlabeled-split masks")
    e.add_argument("--out", help="write the JSON report here")
    a = sub.add_parser("ablation", parents=[common], help="run an ablation preset")
    a.add_argument("--preset", required=True, choices=PRESETS)
    a.add_argument("--no-reuse", action="store_true")
    v = sub.add_parser("perturb-preview", parents=[common], help="grid of perturbation draws")
    v.add_argument("--image", required=True)
    v.add_argument("--scheme", default="STRONG", choices=[s.value for s in Scheme])
    v.add_argument("--n", type=int, default=8)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--geom", action="store_true", help="apply a random affine/flip first")
    v.add_argument("--out", default="preview.png")
    sub.add_parser("report", parents=[common], help="tables and figures for finished experiments")
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "perturb-preview": cmd_perturb_preview,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](args, cfg)
    except (ToolsegError, ValueError, TypeError, OSError, KeyError, yaml.YAMLError) as exc:
        print(f"toolseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
