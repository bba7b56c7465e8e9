"""Command-line entry point.

Subcommands: ``simulate``, ``approx``, ``scaling``, ``hierarchy-compare`` and
``bipartitions``.  Exit codes: 0 on success, 2 for a bad config or
arguments, 3 when an explicitly requested oracle cannot be evaluated.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import Config, ConfigError, load_config
from .oracle import OracleInfeasible

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORACLE = 3


def _load(args) -> Config:
    if args.config is None:
        return Config({}, "", "<defaults>")
    return load_config(args.config)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    if args.config is None:
        raise ConfigError("simulate needs --config")
    settings = harness.simulation_settings(_load(args), args.seed)
    ds = harness.simulate(settings)
    csv_path, meta_path = harness.write_dataset(ds, _out_dir(args))
    print(f"wrote {csv_path} ({ds.y.shape[0]} rows, d = {settings.d}, {settings.levels} levels) and {meta_path}")
    return EXIT_OK


def cmd_approx(args) -> int:
    if args.config is None:
        raise ConfigError("approx needs --config")
    report = harness.approx_from_config(_load(args), args.order, args.oracle, args.seed)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        (out / "approx_report.txt").write_text(text)
        harness._write_csv(out / "approx.csv", ["quantity", "index", "value"], report.rows())
    if report.oracle is None and args.oracle in ("factorized", "tensor"):
        print(f"error: requested oracle '{args.oracle}' is infeasible: {report.oracle_note}", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_scaling(args) -> int:
    if args.oracle == "none":
        raise ConfigError("the scaling study needs an oracle; --oracle none is not allowed")
    settings = harness.scaling_settings(_load(args), args.seed)
    if args.oracle == "tensor":
        raise OracleInfeasible("scaling grids exceed the tensor oracle's dimension cap; use the per-cluster oracle")
    result = harness.run_scaling(settings, threads=args.threads)
    paths = harness.write_scaling_outputs(result, _out_dir(args))
    print(paths["report"].read_text(), end="")
    return EXIT_OK


def cmd_hierarchy_compare(args) -> int:
    if args.oracle in ("none", "factorized"):
        raise OracleInfeasible("the grouping comparison needs the tensor oracle for correlated effects")
    settings = harness.hierarchy_settings(_load(args), args.seed)
    if len(settings.sizes) > 6:
        raise OracleInfeasible(f"d = {len(settings.sizes)} exceeds the tensor oracle's cap of 6")
    result = harness.run_hierarchy_compare(settings)
    paths = harness.write_hierarchy_outputs(result, _out_dir(args))
    print(paths["report"].read_text(), end="")
    return EXIT_OK


def cmd_bipartitions(args) -> int:
    try:
        levels = [int(x) for x in args.levels.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--levels expects comma-separated integers, got {args.levels!r}") from None
    if not levels or min(levels) < 1 or max(levels) > 3:
        raise ConfigError("--levels must list levels between 1 and 3")
    path, count = harness.write_bipartitions(_out_dir(args), levels)
    print(f"wrote {count} classes to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--oracle", choices=harness.ORACLE_MODES, default="auto")
    common.add_argument("--threads", type=int, default=1, help="worker processes for grid studies")

    parser = argparse.ArgumentParser(prog="hdlaplace", description="Higher-order Laplace approximations for GLMM likelihoods.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset from a JSON config")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("approx", parents=[common], help="order-k approximation report for one model")
    p.add_argument("--order", type=int, choices=(1, 2, 3), default=2)
    p.set_defaults(func=cmd_approx, out=None)
    p = sub.add_parser("scaling", parents=[common], help="error-scaling study with slope fits")
    p.set_defaults(func=cmd_scaling)
    p = sub.add_parser("hierarchy-compare", parents=[common], help="compare alternative higher-level groupings")
    p.set_defaults(func=cmd_hierarchy_compare)
    p = sub.add_parser("bipartitions", parents=[common], help="write the connected bipartition class catalog")
    p.add_argument("--levels", default="1,2", help="comma-separated levels (default 1,2)")
    p.set_defaults(func=cmd_bipartitions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleInfeasible as exc:
        print(f"oracle infeasible: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
