"""Command-line entry point.

Exit codes: 0 success, 1 check failure or missing artifacts, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .apxstats import run_suite
from .config import ConfigError, ExperimentConfig
from .predictors import SCHEMES

log = logging.getLogger("cran_harq")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cran-harq",
                                description="HARQ feedback prediction experiments for a two-RRH C-RAN uplink.")
    p.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, help_, schemes=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--snr", type=float, nargs="+", help="restrict to these SNRs (dB)")
        if schemes:
            s.add_argument("--scheme", nargs="+", choices=SCHEMES, help="restrict to these schemes")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return s

    stage("generate", "simulate frames and write datasets")
    stage("train", "train predictors on the generated datasets", schemes=True)
    stage("evaluate", "ROC curves and HARQ operating points on the test split", schemes=True)
    v = sub.add_parser("verify-appendix", help="run the bit-error statistics checks")
    v.add_argument("--bound-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    r = sub.add_parser("report", help="summarize evaluation tables as markdown")
    r.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None or args.output:
            raw = dict(cfg.raw)
            if args.seed is not None:
                raw["seed"] = args.seed
            if args.output:
                raw["output_dir"] = args.output
            cfg = ExperimentConfig(raw)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    root = cfg["output_dir"]

    try:
        if args.command == "generate":
            out = pipeline.generate(cfg, root, args.snr, args.force)
        elif args.command == "train":
            out = pipeline.train(cfg, root, args.snr, args.scheme, args.force)
        elif args.command == "evaluate":
            out = pipeline.evaluate(cfg, root, args.snr, args.scheme, args.force)
        elif args.command == "report":
            out = [pipeline.report(cfg, root, args.force)]
        else:
            rep = run_suite(seed=int(cfg["seed"]), bound_scale=args.bound_scale)
            print("\n".join(rep.lines()))
            return 0 if rep.passed else 1
    except FileExistsError as exc:
        print(f"refusing to overwrite: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.StageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in out:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
