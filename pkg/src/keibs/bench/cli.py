"""Command-line entry point: ``bench run | validate | list-problems``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from ..errors import ConfigError
from ..problems import REGISTRY
from .config import load_config
from .harness import check_output_dir, emit_outputs, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_DESCRIPTIONS = {
    "griewank": "Griewank test function on (-10, 10)^d, minimized; supports shift",
    "schwefel222": "Schwefel-2.22 test function on (-10, 10)^d, minimized; supports shift",
    "rosenbrock": "Rosenbrock test function on (-10, 10)^d (d >= 2), minimized; supports shift",
    "assortment": "multinomial-logit newsvendor profit over prices, maximized",
    "jackson": "Jackson-network class-1 mean cycle time, minimized",
    "prodline": "tandem production line revenue rate (simulation), maximized",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Sparse-grid EI optimization benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write CSV/JSON results")
    run.add_argument("--config", required=True, help="TOML experiment file")
    run.add_argument("--out-dir", help="override output.dir")
    run.add_argument("--threads", type=int, default=1, help="concurrent macro-replications")
    run.add_argument("--raw-schedules", action="store_true", help="disable the lambda/delta caps")
    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)
    sub.add_parser("list-problems", help="list registered problems")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-problems":
        for name in REGISTRY:
            print(f"{name}\t{_DESCRIPTIONS.get(name, '')}")
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"ok: {cfg.problem} d={cfg.d} budgets={list(cfg.budgets)} "
                  f"replications={cfg.replications} optimizers={list(cfg.optimizers)}")
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        if args.raw_schedules:
            cfg = cfg.raw_schedules()
        if args.out_dir:
            cfg = replace(cfg, out_dir=args.out_dir)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        check_output_dir(cfg.out_dir)
        rows, records = run_experiment(cfg, threads=args.threads)
        out = emit_outputs(rows, records, cfg)
    except Exception as exc:  # any failure after validation is a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for row in rows:
        print(f"{row.problem} d={row.d} N={row.N} {row.optimizer}: aeov={row.aeov:.6g} sd={row.sd:.3g}")
    print(f"results written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
