"""Command-line pipeline: train-base, profile, gate-train, remove, fold,
recover, eval, compare, report. Exit codes: 0 success, 1 usage/config
error, 2 numerical failure."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config

COMMANDS = {
    "train-base": pipeline.run_train_base,
    "profile": pipeline.run_profile,
    "gate-train": pipeline.run_gate_train,
    "remove": pipeline.run_remove,
    "fold": pipeline.run_fold,
    "recover": pipeline.run_recover,
    "eval": pipeline.run_eval,
    "compare": pipeline.run_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="foldlab",
                                     description="gated block removal + grouped parameter "
                                                 "sharing pipeline for a toy transformer")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config path")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--force", action="store_true", help="re-run even if up to date")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.overrides, seed=args.seed)
        with pipeline.WorkdirLock(cfg.workdir):
            if args.command == "report":
                pipeline.run_report(cfg)
            else:
                COMMANDS[args.command](cfg, force=args.force)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
