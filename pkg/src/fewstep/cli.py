"""Command-line entry point.

Subcommands map one-to-one onto pipeline stages, plus `run` for the full
configured sequence. Every subcommand takes --config plus any number of
--set key=value overrides (dotted keys, JSON-parsed values).
"""

from __future__ import annotations

import argparse
import sys

from . import config as cfgmod
from .pipeline import run_experiment

_STAGE_COMMANDS = {
    "train-teacher": ["train-teacher"],
    "rollout": ["rollout"],
    "distill": ["distill"],
    "eval": ["eval"],
    "analyze": ["analyze"],
    "run": None,  # use the config's stage list
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewstep",
        description="Few-step masked diffusion LM lab: train, distill, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage(s)")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config key (dotted path, JSON value)",
        )
        p.add_argument("--base-dir", default=None, help="root for output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = cfgmod.load_config(args.config)
    cfg = cfgmod.apply_overrides(cfg, args.overrides)
    stages = _STAGE_COMMANDS[args.command]
    try:
        out = run_experiment(cfg, base_dir=args.base_dir, stages=stages)
    except Exception as exc:  # surface the failure but exit cleanly
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
