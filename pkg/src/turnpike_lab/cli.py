"""Command-line entry point: ``turnpike-lab run|validate|oracle``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .errors import TurnpikeLabError
from .experiment import EXIT_ERROR, EXIT_FLAGGED, EXIT_OK, run_experiment, run_oracle

LOG_ENV = "TURNPIKE_LAB_LOG"
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get(LOG_ENV, "warn").strip().lower()
    level = _LEVELS.get(name)
    logging.basicConfig(level=level or logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level is None:
        logging.getLogger(__name__).warning("%s=%r not in %s; using warn", LOG_ENV, name, sorted(_LEVELS))


def _fail(exc) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc)}
    field = getattr(exc, "field", None) or getattr(exc, "path", None)
    if field:
        msg["where"] = field
    print(json.dumps(msg), file=sys.stderr)
    return EXIT_ERROR


def _parser():
    ap = argparse.ArgumentParser(prog="turnpike-lab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write its reports")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--jobs", type=int, default=1, help="parallel horizon solves")
    run.add_argument("--seed", type=int, help="override the config seed")
    val = sub.add_parser("validate", help="check a config without solving")
    val.add_argument("config")
    orc = sub.add_parser("oracle", help="compare the solver with brute force on tiny instances")
    orc.add_argument("config")
    orc.add_argument("--seed", type=int)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.command == "validate":
            print(f"ok: {cfg.kind}, {len(cfg.horizons)} horizons, seed {cfg.seed}")
            return EXIT_OK
        if args.command == "oracle":
            cases = run_oracle(cfg)
            for c in cases:
                mark = "PASS" if c.ok else "FAIL"
                print(f"{mark} instance {c.index}: solver {c.solver_value:.12g} oracle {c.oracle_value:.12g} ({c.search_space} sequences)")
            return EXIT_OK if all(c.ok for c in cases) else EXIT_FLAGGED
        if args.out:
            cfg = cfg.replace(output_dir=args.out)
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        outcome = run_experiment(cfg, jobs=args.jobs)
    except (TurnpikeLabError, OSError, ValueError) as exc:
        return _fail(exc)
    print(f"wrote {outcome.output_dir}")
    for f in outcome.flags:
        print(f"flag: {f}")
    for w in outcome.warnings:
        print(f"warning: {w}")
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
