"""Command-line entry point: ``pgrec [options]``.

Flags override the matching config-file values; without ``--config`` the
built-in defaults apply.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import SMOKE_CONFIG, VARIANTS, ConfigError, ExperimentConfig, load_config
from .experiment import SUMMARY_FILE, read_results, run_experiment

_log = logging.getLogger(__name__)


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgrec", description="Train and evaluate preference-graph recommenders.")
    p.add_argument("--config", help="YAML experiment configuration")
    p.add_argument("--smoke", action="store_true", help="use the bundled synthetic mini dataset and config")
    p.add_argument("--dataset", help="MovieLens directory")
    p.add_argument("--flavor", choices=["100K", "1M"], type=str.upper)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--upl", type=_int_list, help="comma-separated profile lengths, e.g. 10,20,50")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int, help="base seed; runs use seed, seed+1, ...")
    p.add_argument("--output", help="output directory")
    p.add_argument("--topn", type=_int_list, help="comma-separated NDCG cutoffs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--subsample-users", type=int, help="keep this many random users")
    p.add_argument("--denominator", choices=["candidates", "rated"],
                   help="normalize item scores by candidate count (default) or the user's rated-item count")
    p.add_argument("--save-checkpoint", action="store_true", help="write trained parameters per run")
    p.add_argument("--load-checkpoint", help="initialize training from this checkpoint")
    p.add_argument("--jobs", type=int, default=1, help="run-level worker processes")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.smoke and args.config:
        raise ConfigError("--smoke and --config are mutually exclusive")
    path = SMOKE_CONFIG if args.smoke else args.config
    cfg = load_config(path) if path else ExperimentConfig()
    changes = {}
    if args.dataset:
        changes["dataset__path"] = args.dataset
    if args.flavor:
        changes["dataset__flavor"] = args.flavor
    if args.subsample_users is not None:
        changes["dataset__subsample_users"] = args.subsample_users
    if args.variant:
        changes["variant"] = args.variant
    if args.upl:
        changes["protocol__upl"] = args.upl
    if args.topn:
        changes["protocol__topn"] = args.topn
    if args.denominator:
        changes["protocol__denominator"] = args.denominator
    runs = args.runs if args.runs is not None else cfg.protocol.runs
    if args.runs is not None or args.seed is not None:
        if args.seed is not None:
            seeds = tuple(range(args.seed, args.seed + runs))
        elif cfg.protocol.seeds is not None and len(cfg.protocol.seeds) == runs:
            seeds = cfg.protocol.seeds
        else:
            seeds = None
        changes["protocol__runs"] = runs
        changes["protocol__seeds"] = seeds
    if args.epochs is not None:
        changes["training__epochs"] = args.epochs
    if args.output:
        changes["output"] = args.output
    try:
        return cfg.replace(**changes) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"pgrec: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("pgrec: --jobs must be >= 1", file=sys.stderr)
        return 2
    path = run_experiment(cfg, jobs=args.jobs, init_checkpoint=args.load_checkpoint,
                          save_checkpoints=args.save_checkpoint)
    for row in read_results(path.parent / SUMMARY_FILE):
        print(f"{row['variant']:>9} upl={row['upl']:>3} NDCG@{row['n']:<3} "
              f"{float(row['mean']):.4f} +- {float(row['std']):.4f} ({row['runs']} runs)")
    print(f"results: {path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
