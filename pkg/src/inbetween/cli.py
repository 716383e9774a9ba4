"""Command-line entry points.

Exit codes: 0 success, 2 invalid config or usage, 3 denoiser backend
unreachable, 1 any other operational failure. INBETWEEN_OUT, when set,
prefixes relative output directories from config files (an explicit
--out wins as given).
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .diagnostics import dump_mid_estimates
from .errors import BackendUnavailableError, ConfigError, SnapshotMissingError
from .harness import ExperimentConfig, conflict_benchmark, load_run_trace, run_experiment

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inbetween", description="Sampler laboratory experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name: str, help_text: str):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="YAML experiment config")
        cmd.add_argument("--seed", type=int, default=None, help="run only this seed")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--jobs", type=int, default=None, help="parallel worker count")
        return cmd

    add_config_command("run", "execute the configured modes at the base gridpoint")
    add_config_command("sweep", "execute the full sweep grid")
    add_config_command("bench-conflict", "head-to-head benchmark of the four two-sided modes")

    dump = sub.add_parser("dump-mid", help="export snapshotted clean estimates from a run")
    dump.add_argument("run_dir", help="a single run directory (mode/gridpoint/seed)")
    dump.add_argument(
        "--at", type=float, default=0.5, help="fraction of the schedule, in (0, 1]"
    )
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config)
    updates: dict = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    out = args.out if args.out is not None else config.out_dir
    if args.out is None and not Path(out).is_absolute():
        root = os.environ.get("INBETWEEN_OUT")
        if root:
            out = str(Path(root) / out)
    updates["out_dir"] = out
    return dataclasses.replace(config, **updates)


def _summarize(report: dict, out_dir: str, name: str) -> None:
    print(f"{len(report['runs'])} runs -> {Path(out_dir) / (name + '.json')}")
    for pair, rates in report.get("win_rates", {}).items():
        rendered = " ".join(f"{k}={v:.2f}" for k, v in rates.items())
        print(f"  {pair}: {rendered}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "dump-mid":
            trace = load_run_trace(args.run_dir)
            written = dump_mid_estimates(trace, args.at, Path(args.run_dir) / "mid")
            for path in written:
                print(path)
            return 0
        config = _load_config(args)
        if args.command == "run":
            report = run_experiment(config, expand_sweep=False)
            _summarize(report, config.out_dir, "report")
        elif args.command == "sweep":
            report = run_experiment(config, expand_sweep=True)
            _summarize(report, config.out_dir, "report")
        else:
            report = conflict_benchmark(config)
            _summarize(report, config.out_dir, "bench_report")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BackendUnavailableError as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return 3
    except (SnapshotMissingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
