"""Command line: ``uam {train,sweep,analyze,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment, probe, verify
from .experiment import ConfigError, ExperimentConfig, SweepError


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        config = ExperimentConfig()
    if args.data_dir:
        config.data_dir = args.data_dir
    if args.variant:
        names = [v for v in args.variant.split(",") if v]
        config.variant = names[0]
        if len(names) > 1 or args.command == "sweep":
            config.variants = names
    if args.n is not None:
        ns = [int(x) for x in args.n.split(",") if x]
        config.imbalance_n = ns[0]
        if len(ns) > 1 or args.command == "sweep":
            config.ns = ns
    if args.seed:
        config.seeds = list(args.seed)
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.out:
        config.output_dir = args.out
    if args.workers is not None:
        config.workers = args.workers
    if args.saliency:
        config.saliency_mode = args.saliency
    if args.window is not None:
        config.window = args.window
    if args.hidden is not None:
        sizes = config.net.layer_sizes
        config.net.layer_sizes = [sizes[0]] + [args.hidden] * (len(sizes) - 2) + [sizes[-1]]
    if args.rescale is not None:
        config.net.rescale = args.rescale
    return config.validate()


def _add_run_flags(p):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--data-dir", help="directory holding the MNIST IDX files "
                                      "(falls back to $UAM_DATA_DIR)")
    p.add_argument("--variant", help="normalization variant(s), comma separated: "
                                     "none,bn,ln,wn,rn,sn,rbn,rln,ln_rn")
    p.add_argument("--n", help="imbalance degree(s) 0-9, comma separated")
    p.add_argument("--seed", type=int, action="append", help="repeatable")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel runs (default: logical cores)")
    p.add_argument("--saliency", choices=experiment.SALIENCY_MODES)
    p.add_argument("--window", type=int, help="derivative smoothing window")
    p.add_argument("--hidden", type=int, help="override every hidden layer width")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rescale", dest="rescale", action="store_true", default=None,
                   help="divide L by its running mean (harness default)")
    g.add_argument("--no-rescale", dest="rescale", action="store_false",
                   help="use raw code lengths as in the bare algorithm")


def build_parser():
    parser = argparse.ArgumentParser(prog="uam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("train", help="train and evaluate one configuration"))
    _add_run_flags(sub.add_parser("sweep", help="variant x n x seed grid with mean ± stderr"))
    p = sub.add_parser("analyze", help="COMP deltas, derivatives and plots for a run")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--window", type=int, default=probe.DEFAULT_WINDOW)
    sub.add_parser("verify", help="run the invariant and oracle checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            results = experiment.cmd_train(_load_config(args))
            for r in results:
                m = r["metrics"]
                print(f"{m['variant']} n={m['n']} seed={m['seed']} "
                      f"test_error={m['test_error']:.2f}")
        elif args.command == "sweep":
            config = _load_config(args)
            result = experiment.cmd_sweep(config)
            print(result.table_csv(config.sweep_variants, config.sweep_ns), end="")
        elif args.command == "analyze":
            _, files = experiment.cmd_analyze(args.run_dir, args.out, args.window)
            for f in files:
                print(f)
        elif args.command == "verify":
            results = verify.run_checks()
            for r in results:
                print(json.dumps(r, sort_keys=True))
            failed = [r["check"] for r in results if not r["passed"]]
            print(json.dumps({"summary": "fail" if failed else "pass",
                              "checks": len(results), "failed": failed}, sort_keys=True))
            return 1 if failed else 0
    except (ConfigError, SweepError, FileNotFoundError, OSError, ValueError,
            FloatingPointError) as exc:
        print(f"uam {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
