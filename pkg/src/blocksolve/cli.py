"""Command-line entry point: ``blocksolve run | check | export-plotdata``."""

from __future__ import annotations

import argparse
import json
import sys

from blocksolve.operators import CertificateUnavailable, MissingCertificate
from blocksolve.solvers import InfeasibleParameters
from blocksolve.splitting import InfeasibleLambda


def cmd_run(args) -> int:
    from blocksolve.runner import ConfigError, execute, load_config
    from pathlib import Path

    try:
        cfg = load_config(args.config)
        summary = execute(cfg, Path(args.config).parent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleParameters, InfeasibleLambda) as exc:
        print(f"infeasible parameters: {exc}", file=sys.stderr)
        return 2
    except (MissingCertificate, CertificateUnavailable) as exc:
        print(f"missing certificate: {exc}", file=sys.stderr)
        return 2
    out = {k: summary[k] for k in ("config_hash", "solver", "seeds") if k in summary}
    for key in ("ergodic_bound", "envelope", "rate_fit", "summable_checks"):
        if key in summary:
            out[key] = summary[key]
    print(json.dumps(out, indent=2))
    return 0


def cmd_check(args) -> int:
    from blocksolve.checks import run_suite, suite_checks

    try:
        suite_checks(args.suite, args.fixtures)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return 2
    results = run_suite(args.suite, args.fixtures)
    failed = [r for r in results if not r.passed]
    total = sum(r.runtime for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return 1 if failed else 0


def cmd_export(args) -> int:
    from blocksolve.runner import export_plotdata

    try:
        path = export_plotdata(args.dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocksolve",
                                     description="Randomized block-coordinate optimistic gradient solvers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment described by a JSON config")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check", help="run an invariant check suite")
    p_check.add_argument("suite", help="lemmas, solvers, federated or all")
    p_check.add_argument("--fixtures", default=None, help="directory overriding the shipped fixtures")
    p_check.set_defaults(func=cmd_check)

    p_exp = sub.add_parser("export-plotdata", help="aggregate traces across seeds into plotdata.csv")
    p_exp.add_argument("dir")
    p_exp.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
