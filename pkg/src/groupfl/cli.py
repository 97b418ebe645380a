"""Command line entry point: ``groupfl {run,compare,sweep,check}``.

Exit codes: 0 success, 1 failed invariant check, 2 configuration error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .errors import ConfigError, DivergenceError, FormatError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--preset", choices=["default", "desk"], default="default",
                   help="starting point before the config file and flags are applied")
    group = p.add_argument_group("config overrides (take precedence over the file)")
    for f in fields(harness.ExperimentConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE", default=None)


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.desk_preset() if args.preset == "desk" else harness.ExperimentConfig()
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = cfg.override(**harness.read_config_file(args.config))
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.override(**flags)


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"sweep axis {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        grid[key.strip().replace("-", "_")] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise ConfigError("sweep needs at least one --grid key=v1,v2")
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupfl", description="Group federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment (all repeats) and write its artifact directory")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, default=Path("runs/experiment"))

    p = sub.add_parser("compare", help="run several algorithms on the same data and compare them")
    _add_config_flags(p)
    p.add_argument("--algorithms", default="fedavg,hierfavg,fedavg_ic",
                   help="comma-separated algorithms, each run with the shared config")
    p.add_argument("--metric", choices=harness.METRICS, default="time_to_accuracy")
    p.add_argument("--budget", type=float, default=None, help="simulated seconds for accuracy_at_time")
    p.add_argument("--out", type=Path, default=Path("runs/compare"))

    p = sub.add_parser("sweep", help="cartesian sweep over config keys")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="sweep axis (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))

    p = sub.add_parser("check", help="run quick invariant checks on the configured setup")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            art = harness.run_experiment(cfg, args.out)
            final = art.summary["test_accuracy_mean"][-1]
            print(f"{cfg.name}: {cfg.repeats} run(s), final mean test accuracy {final:.4f} -> {art.path}")
        elif args.command == "compare":
            algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
            configs = [cfg.override(algorithm=a, name=a) for a in algos]
            print(harness.compare(configs, args.metric, args.out, args.budget), end="")
        elif args.command == "sweep":
            print(harness.sweep(cfg, _parse_grid(args.grid), args.out), end="")
        elif args.command == "check":
            results = harness.check(cfg, steps=args.steps)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
            return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK_FAILED
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
