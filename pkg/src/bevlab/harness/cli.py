"""Command-line entry point: ``bevlab <command> [--config PATH] [--seed N] [--out-dir DIR]``."""
from __future__ import annotations

import argparse
import sys

from .config import ExperimentConfig
from . import experiments as ex

COMMANDS = ("gen-scenes", "train", "eval", "compare-upsamplers", "sweep-scale", "sweep-msa",
            "cost-report", "render")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevlab", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the master and dataset seed")
    p.add_argument("--out-dir", help="output directory (default: outputs.dir/<command>)")
    p.add_argument("--checkpoint", help="model checkpoint for eval and render")
    p.add_argument("--index", type=int, default=0, help="validation scene index for render")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict()
    if args.seed is not None:
        cfg = cfg.override(**{"seed": args.seed, "dataset.seed": args.seed})
    return cfg


def run(args) -> object:
    cfg = load_config(args)
    out = args.out_dir or f"{cfg.raw['outputs']['dir']}/{args.command}"
    cmd = args.command
    if cmd in ("eval",) and not args.checkpoint:
        raise ValueError("eval needs --checkpoint")
    handlers = {
        "gen-scenes": lambda: ex.cmd_gen_scenes(cfg, out),
        "train": lambda: ex.cmd_train(cfg, out),
        "eval": lambda: ex.cmd_eval(cfg, out, args.checkpoint),
        "compare-upsamplers": lambda: ex.cmd_compare_upsamplers(cfg, out),
        "sweep-scale": lambda: ex.cmd_sweep_scale(cfg, out),
        "sweep-msa": lambda: ex.cmd_sweep_msa(cfg, out),
        "cost-report": lambda: ex.cmd_cost_report(cfg, out),
        "render": lambda: ex.cmd_render(cfg, out, args.checkpoint, args.index),
    }
    return handlers[cmd]()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except Exception as e:  # one parsable line per failure
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    paths = result if isinstance(result, list) else [result]
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
