"""Command-line entry point.

    phaselab --config run.toml --stage all --out results/

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Errors are
reported as a single machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, run_pipeline


def make_parser():
    p = argparse.ArgumentParser(
        prog="phaselab",
        description="Phase tracking and reduced stochastic dynamics for "
                    "patterns on periodic 1-D domains.")
    p.add_argument("--config", required=True, help="TOML or JSON config file")
    p.add_argument("--stage", default="all", choices=STAGES,
                   help="pipeline stage to run")
    p.add_argument("--seed", type=int, default=None,
                   help="override run.master_seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for path ensembles "
                        "(PHASELAB_THREADS overrides)")
    p.add_argument("--out", default=None, help="override output.directory")
    p.add_argument("--validate-only", action="store_true",
                   help="validate the config, echo it normalized, and exit")
    return p


def _fail(code, stage, message):
    print(json.dumps({"error": message, "stage": stage}), file=sys.stderr)
    return code


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        cfg, warnings = load_config(args.config)
    except ConfigError as e:
        return _fail(1, "config", "; ".join(e.errors))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.seed is not None:
        cfg["run"]["master_seed"] = args.seed
    outdir = args.out or cfg["output"]["directory"]
    threads = int(os.environ.get("PHASELAB_THREADS", args.threads))
    if args.validate_only:
        print(json.dumps(cfg, indent=2, sort_keys=True, default=str))
        return 0
    try:
        manifest = run_pipeline(cfg, args.stage, outdir, threads=threads)
    except StageError as e:
        return _fail(2, e.stage, str(e))
    except ConfigError as e:
        return _fail(1, "config", "; ".join(e.errors))
    print(json.dumps({"ok": True, "stage": args.stage,
                      "config_hash": manifest["config_hash"],
                      "quantities": manifest["quantities"]},
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
