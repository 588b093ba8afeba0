"""Command line entry point: nfdlab <experiment> [options]."""

from __future__ import annotations

import argparse
import sys

from .errors import NfdlabError
from .harness import EXPERIMENTS, ExperimentSpec, parse_config, run


def build_parser() -> argparse.ArgumentParser:
    experiments = "\n".join(
        f"  {name:<22} {claim}" for name, claim in EXPERIMENTS.items()
    )
    parser = argparse.ArgumentParser(
        prog="nfdlab",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Numerical laboratory for feature-learning dynamics of "
        "deep residual networks.\n\nexperiments:\n" + experiments,
    )
    parser.add_argument("experiment", choices=sorted(EXPERIMENTS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="override the seed list with one seed")
    parser.add_argument("--out", help="output CSV path")
    parser.add_argument(
        "--workers", type=int, default=1,
        help="grid-point worker limit (results are worker-count independent)",
    )
    parser.add_argument(
        "--figure-scale", action="store_true",
        help="use the figure-style protocol (CIFAR-10 subset, batch 128); "
        "needs a data batch under NFDLAB_DATA_DIR",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            spec = parse_config(args.config)
            if spec.experiment != args.experiment:
                print(
                    f"error: config is for {spec.experiment!r}, "
                    f"command line says {args.experiment!r}",
                    file=sys.stderr,
                )
                return 2
        else:
            spec = ExperimentSpec(experiment=args.experiment)
        if args.seed is not None:
            spec.seeds = [args.seed]
        if args.out is not None:
            spec.out = args.out
        records = run(spec, workers=args.workers, figure_scale=args.figure_scale)
    except NfdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{len(records)} records" + (f" -> {spec.out}" if spec.out else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
