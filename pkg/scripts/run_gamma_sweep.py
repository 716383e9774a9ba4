#!/usr/bin/env python3
"""Sweep the distill-phase fraction and print composite scores per cell.

Defaults to configs/gamma_sweep.yaml (five gamma values x 50 seeds on the
conflicted world, roughly five minutes). The composite is endpoint mse at
the final frame plus temporal smoothness; lower is better.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from inbetween.harness import ExperimentConfig, run_experiment


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--config", default=str(REPO / "configs" / "gamma_sweep.yaml"),
        help="experiment config with a sweep section",
    )
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--seeds", type=int, default=None, help="override the seed count")
    args = parser.parse_args(argv)

    config = ExperimentConfig.from_file(args.config)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    if args.seeds is not None:
        config = dataclasses.replace(
            config, seeds=tuple(range(config.seeds[0], config.seeds[0] + args.seeds))
        )
    report = run_experiment(config, expand_sweep=True)

    print(f"\ncomposites over {len(config.seeds)} seeds (lower is better)")
    print(f"{'gridpoint':>12} {'mode':>16}  {'end_mse':>9}  {'smoothness':>10}  {'composite':>10}")
    for cell in report["cells"]:
        m = cell["metrics"]
        mse = m["endpoint_mse_end"]["mean"]
        smooth = m["smoothness"]["mean"]
        print(
            f"{cell['gridpoint']:>12} {cell['mode']:>16}  "
            f"{mse:9.4f}  {smooth:10.3f}  {mse + smooth:10.3f}"
        )
    print(f"\nfull report: {Path(config.out_dir) / 'report.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
