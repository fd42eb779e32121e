"""Command-line entry point.

    branchsim SUBCOMMAND --config PATH [--seed U64] [--out DIR]
              [--format csv|json] [--workers N]

Exit codes: 0 ok, 2 invalid spec, 3 solver did not converge, 4 invalid
Monte Carlo estimate (population cap), 5 a verification check failed,
6 I/O error.
"""
from __future__ import annotations

import argparse
import sys

from .harness import (COMMANDS, ValidationError, export_results, load_spec, report_text,
                      run_experiment)
from .io import ExportError
from .particles import CapExceededError
from .picard import NonConvergenceError
from .stats import InvalidEstimateError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_INVALID_ESTIMATE = 4
EXIT_VERIFY_FAIL = 5
EXIT_IO = 6


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchsim",
                                description="Branching particle systems: solve, simulate, verify.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "solve-h": "solve for H_t phi by Picard iteration",
        "solve-q": "solve the linear first-moment semigroup Q_t f",
        "cumulant": "cumulant V_t f (or N_t f for a [mechanism] spec)",
        "simulate": "Monte Carlo estimate of a functional of mu_t",
        "verify": "run the identity checks and report PASS/FAIL",
        "compose": "discrete branching over superprocess clusters",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", required=True, help="TOML or JSON experiment spec")
        s.add_argument("--seed", type=_u64, default=None, help="master seed (overrides config)")
        s.add_argument("--out", default=None, help="output directory")
        s.add_argument("--format", choices=("csv", "json"), default=None)
        s.add_argument("--workers", type=int, default=None, help="worker processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.config, seed=args.seed, out_dir=args.out, workers=args.workers,
                         fmt=args.format)
        bundle = run_experiment(spec, args.command)
        if spec.out_dir is not None:
            export_results(bundle, spec.out_dir, spec.formats)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonConvergenceError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (InvalidEstimateError, CapExceededError) as exc:
        print(f"invalid estimate: {exc}", file=sys.stderr)
        return EXIT_INVALID_ESTIMATE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    for name, table in bundle.tables.items():
        print(f"{name}: {table.times.size} times x {table.n_states} states, "
              f"iterations={table.meta.get('iterations')}, "
              f"residual={table.meta.get('residual', 0.0):.3e}")
    for e in bundle.estimates:
        print(f"{e['name']}{'[' + str(e['state']) + ']' if e['state'] != '' else ''}: "
              f"mean={e['mean']:.6g} stderr={e['stderr']:.3g} "
              f"reference={e['reference']:.6g} replicas={e['replicas']} capped={e['capped']}")
    if bundle.report is not None:
        print(report_text(bundle.report), end="")
        if not bundle.report["passed"]:
            return EXIT_VERIFY_FAIL
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
