"""Command line entry point: ``swddc run | list-experiments | validate``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .config import FILTERS, SOLVERS, ConfigError, load_config

OUT_ENV = "SWDDC_OUT_DIR"

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def builtin_experiments() -> dict:
    """Name -> path of every config shipped with the package."""
    root = resources.files("swddc") / "experiments"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".yaml")}


def _resolve_config_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    known = builtin_experiments()
    if arg in known:
        return known[arg]
    raise ConfigError(f"{arg!r} is neither a file nor a built-in experiment (see `swddc list-experiments`)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swddc", description="Data-driven stochastic optimal control experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV outputs")
    run.add_argument("config", help="config file or built-in experiment name")
    run.add_argument("--trials", type=int, help="number of independent trials")
    run.add_argument("--seed", type=int, help="base random seed")
    run.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs/<name>)")
    run.add_argument("--filter", choices=FILTERS)
    run.add_argument("--solver", choices=SOLVERS)
    run.add_argument("--particles", type=int, help="particles (or ensemble members) in the filter")

    sub.add_parser("list-experiments", help="list built-in experiment configs")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config")
    return ap


def _cmd_run(args) -> int:
    from .harness import run_trials

    cfg = load_config(_resolve_config_path(args.config))
    overrides = {k: getattr(args, k) for k in ("trials", "seed", "filter", "solver", "particles") if getattr(args, k) is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides).resolved()
    out = args.out or os.environ.get(OUT_ENV) or str(Path("runs") / cfg.name)
    summary = run_trials(cfg, cfg.trials, out)
    for key, value in summary.metrics().items():
        print(f"{key}: {value}")
    print(f"outputs written to {out}")
    if not summary.completed:
        print("error: every trial failed", file=sys.stderr)
        for k, msg in summary.failures.items():
            print(f"  trial {k}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_list(args) -> int:
    for name, path in builtin_experiments().items():
        try:
            cfg = load_config(path)
            print(f"{name:24s} problem={cfg.problem} filter={cfg.filter}({cfg.particles}) solver={cfg.solver} trials={cfg.trials}")
        except ConfigError as exc:
            print(f"{name:24s} INVALID: {exc}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(_resolve_config_path(args.config))
    print(f"ok: {cfg.name} (problem={cfg.problem}, filter={cfg.filter}, solver={cfg.solver})")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "list-experiments": _cmd_list, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
