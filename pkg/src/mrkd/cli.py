"""mrkd command line: train, gradcheck, sweep, report."""
from __future__ import annotations

import argparse
import sys

from . import experiment, gradcheck


def _apply_overrides(spec: dict, args) -> dict:
    if args.runs is not None:
        spec["runs"] = args.runs
    if args.seed is not None:
        spec["train"]["seed"] = args.seed
    return experiment.normalize_spec(spec)


def cmd_train(args) -> int:
    spec = _apply_overrides(experiment.load_spec(args.spec), args)
    result = experiment.run_experiment(spec, args.out)
    print(f"results: {result.directory}")
    print(result.summary_line)
    return 0


def cmd_gradcheck(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows, seconds = gradcheck.run_gradcheck(sizes=sizes, cases=args.cases, seed=args.seed or 0)
    print(gradcheck.format_table(rows, args.tolerance))
    print(f"{len(rows) * args.cases} cases in {seconds:.1f} s")
    failed = [r for r in rows if not r.passed(args.tolerance)]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"FAIL: {worst.variant} (M={worst.classes}) relative error "
              f"{worst.max_rel_error:.3e} exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    sweep = experiment.load_sweep(args.spec)
    base = sweep["base"]
    if not isinstance(base, dict):
        raise experiment.SpecError("base: missing experiment spec")
    base = _apply_overrides(experiment.normalize_spec(base), args)
    grid = args.grid or sweep["mode"] == "grid"
    experiment.run_sweep(base, sweep["axes"], args.out, grid=grid, parallel=args.parallel)
    print(f"summary: {args.out}/summary.csv")
    return 0


def cmd_report(args) -> int:
    md, table = experiment.write_report(args.out)
    print(md.read_text(), end="")
    print(f"written: {md}, {table}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--runs", type=int, default=None, help="runs per experiment (spec default 4)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--sizes", default="2,10,100", help="comma-separated class counts")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="run a hyperparameter sweep")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--grid", action="store_true", help="full cartesian grid instead of one axis at a time")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate aggregate results")
    p.add_argument("--out", default="results", help="results directory to scan and write into")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except experiment.SpecError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
