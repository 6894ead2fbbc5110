"""Command-line experiment runner.

Verbs: prepare, train-base, measure, train-predictors, cactus-run,
report.  Exit codes: 0 success, 2 configuration or validation failure,
3 runtime numeric failure.
"""

import argparse
import json
import sys

from .config import load_config
from .errors import ConfigError, ManifestError, NumericFailureError
from . import runner

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser():
    p = argparse.ArgumentParser(
        prog="cactusnet",
        description="Layer applicability measurement and CactusNet growth")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--workers", type=int, help="override the worker limit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", help="write the manifest for a synthetic run")
    sub.add_parser("train-base", help="train the base classifier")
    sub.add_parser("measure", help="run the 1-vs-1 applicability sweep")
    sub.add_parser("train-predictors",
                   help="train per-layer applicability predictors")
    cac = sub.add_parser("cactus-run", help="route a stream through the tree")
    cac.add_argument("stream", help="stream JSON (mock/manifest/dataset)")
    sub.add_parser("report", help="bundle plot-ready outputs")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {"out_dir": args.out, "master_seed": args.seed,
                 "workers": args.workers}
    try:
        cfg = load_config(args.config, cli_overrides=overrides)
        if args.command == "prepare":
            path = runner.prepare(cfg)
            result = {"manifest": str(path)}
        elif args.command == "train-base":
            result = runner.run_train_base(cfg)
        elif args.command == "measure":
            result = runner.run_measure(cfg)
        elif args.command == "train-predictors":
            result = runner.run_train_predictors(cfg)
        elif args.command == "cactus-run":
            result = runner.run_cactus(cfg, args.stream)
        elif args.command == "report":
            result = runner.run_report(cfg)
        else:  # pragma: no cover - argparse guards this
            return EXIT_CONFIG
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
