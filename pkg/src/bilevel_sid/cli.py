"""Command-line entry point ``bilevel-sid``.

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigurationError, DataError, InvariantFailure, NumericalFailure
from .harness import _jsonable, bounds_table, fmt, load_config, run_bsgm_campaign, run_mse_sweep, write_json
from .problems import list_problems

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=_u64, default=0, help="master seed (default 0)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.add_argument("--threads", type=_positive, default=1, help="worker threads (default 1)")
    p.add_argument("--strict-schedule", action=argparse.BooleanOptionalAction, default=True,
                   help="validate step schedules against the problem constants (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-sid",
                                     description="SID hypergradients and BSGM experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("mse-sweep", help="Monte Carlo MSE of SID over a t grid"))
    _common(sub.add_parser("bsgm", help="multi-seed BSGM campaign"))
    _common(sub.add_parser("bounds", help="print every theoretical constant"))
    probs = sub.add_parser("problems", help="benchmark problems")
    probs_sub = probs.add_subparsers(dest="action", required=True)
    probs_sub.add_parser("list", help="list problem names and parameter schemas")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "problems":
            print(json.dumps(_jsonable(list_problems()), indent=2, sort_keys=True))
            return EXIT_OK
        config = load_config(args.config)
        strict = args.strict_schedule
        if args.command == "mse-sweep":
            summary = run_mse_sweep(config, args.seed, args.out, args.threads, strict)
            print(json.dumps(_jsonable({"slope": summary["slope"], "flags": summary["flags"]}),
                             sort_keys=True))
        elif args.command == "bsgm":
            summary = run_bsgm_campaign(config, args.seed, args.out, args.threads, strict)
            print(json.dumps(_jsonable({k: summary[k] for k in (
                "mean_avg_G_alpha_norm_sq", "theory_rhs", "N", "N_bounds", "flags")}),
                sort_keys=True))
        else:
            table = bounds_table(config, strict)
            width = max(len(k) for k in table)
            for key, value in table.items():
                shown = value if isinstance(value, str) else fmt(value) or "n/a"
                print(f"{key:<{width}}  {shown}")
            if args.config is not None or args.out != ".":
                os.makedirs(args.out, exist_ok=True)
                write_json(os.path.join(args.out, "bounds.json"), table)
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigurationError, DataError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
