"""``efn`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from efn import config as cfgmod
from efn import workflows as wf
from efn.autodiff import NumericalError
from efn.config import ConfigError
from efn.training import TrainingFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMMANDS = ("train", "lookup", "compare", "decide", "simulate")


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value <= cfgmod.MAX_SEED:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="efn", description="Exponential family networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    helps = {
        "train": "train an EFN or a single-eta NF",
        "lookup": "sample a trained EFN at a new eta or dataset",
        "compare": "evaluate an EFN against per-eta NF runs",
        "decide": "decision boundary from EFN and NF training logs",
        "simulate": "write a synthetic spike-train corpus",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides paths.out_dir)")
        p.add_argument("--seed", type=_seed, default=None, help="run seed (overrides the config)")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, out_dir=args.out)
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"efn {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFailure as exc:
        where = exc.checkpoint_path or "none written"
        print(f"efn {args.command}: {exc}; last checkpoint: {where}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"efn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _dispatch(args, cfg):
    if args.command == "train":
        result = wf.run_train(cfg, resume=args.resume)
        last = result.log[-1] if result.log else None
        print(f"trained {result.checkpoint.iteration} iterations ({result.stopped})")
        if last is not None:
            print(f"held-out ELBO mean {last.elbo_mean:.4f}")
        print(f"checkpoint: {cfg.checkpoint_path}")
        print(f"log: {cfg.log_path}")
    elif args.command == "lookup":
        result = wf.run_lookup(cfg)
        print(f"{result.samples.shape[0]} samples in {result.seconds:.3f} s -> {result.path}")
    elif args.command == "compare":
        result = wf.run_compare(cfg)
        print(f"metrics: {result.metrics_path}")
        print(result.summary_path.read_text(), end="")
    elif args.command == "decide":
        result = wf.run_decide(cfg)
        print(wf.format_decision_table(result))
    elif args.command == "simulate":
        paths = wf.run_simulate(cfg)
        print(f"wrote {len(paths)} datasets to {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
