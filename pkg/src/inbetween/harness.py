"""Experiment harness: YAML configs, run directories, sweeps, benchmark.

A config names a synthetic world, a sampler setup, the modes to run, and
the seeds. The harness expands (mode x gridpoint x seed), executes each
run into its own directory, scores it, and assembles one report per
experiment. Reports carry no timestamps or hostnames, so rerunning the
same config yields byte-identical report files.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np
import yaml

from .denoisers import GaussianWorldSpec, MotionWorldSpec
from .diagnostics import TraceRecord, score_video, write_pgm_strip
from .errors import ConfigError
from .latents import VideoLatent, load_latent, save_latent
from .samplers import (
    MODES,
    SamplerConfig,
    SamplingTask,
    gaussian_task,
    motion_task,
    run_sampler,
)
from .stepper import GuidanceSpec

__all__ = [
    "ExperimentConfig",
    "build_world",
    "build_task",
    "sampler_config_for",
    "gridpoints",
    "snapshot_steps_for",
    "run_experiment",
    "conflict_benchmark",
    "load_run_trace",
    "CONFLICT_MODES",
]

CONFLICT_MODES = ("parallel", "sequential", "mpd+parallel", "mpd+sequential")

_SAMPLER_KEYS = {
    "steps",
    "guidance",
    "alpha",
    "lam",
    "k",
    "gamma",
    "sigma_min",
    "sigma_max",
    "rho",
}
_SWEEP_KEYS = {"gamma", "k", "lam", "alpha"}
_GAUSSIAN_KEYS = {"kind", "mu", "sigma_d", "shape", "n_frames", "conditions"}
_MOTION_KEYS = {
    "kind",
    "grid",
    "blob_sigma",
    "n_frames",
    "bias_velocity",
    "bias_strength",
    "p_start",
    "p_end",
}


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return mapping[key]


def _as_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return int(value)


def _as_pair(value, where: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{where} must be a [x, y] pair, got {value!r}")
    return (_as_float(value[0], where), _as_float(value[1], where))


def _validate_world(world) -> dict:
    if not isinstance(world, dict):
        raise ConfigError(f"world must be a mapping, got {type(world).__name__}")
    kind = _require(world, "kind", "world")
    if kind == "gaussian":
        unknown = set(world) - _GAUSSIAN_KEYS
        if unknown:
            raise ConfigError(f"unknown gaussian world keys: {sorted(unknown)}")
        out = {
            "kind": "gaussian",
            "mu": world.get("mu", 0.0),
            "sigma_d": _as_float(_require(world, "sigma_d", "world"), "world.sigma_d"),
            "shape": list(world.get("shape", [1, 4, 4])),
            "n_frames": _as_int(_require(world, "n_frames", "world"), "world.n_frames"),
        }
        if len(out["shape"]) != 3:
            raise ConfigError(f"world.shape must be [C, H, W], got {out['shape']}")
        conds = world.get("conditions") or {}
        if not isinstance(conds, dict) or set(conds) - {"start", "end"}:
            raise ConfigError("world.conditions must map a subset of {start, end}")
        out["conditions"] = {k: conds[k] for k in sorted(conds) if conds[k] is not None}
        return out
    if kind == "motion":
        unknown = set(world) - _MOTION_KEYS
        if unknown:
            raise ConfigError(f"unknown motion world keys: {sorted(unknown)}")
        h, w = _as_pair(world.get("grid", [32, 32]), "world.grid")
        return {
            "kind": "motion",
            "grid": [int(h), int(w)],
            "blob_sigma": _as_float(world.get("blob_sigma", 1.5), "world.blob_sigma"),
            "n_frames": _as_int(world.get("n_frames", 25), "world.n_frames"),
            "bias_velocity": list(_as_pair(world.get("bias_velocity", [0.0, 0.0]), "world.bias_velocity")),
            "bias_strength": _as_float(
                _require(world, "bias_strength", "world"), "world.bias_strength"
            ),
            "p_start": list(_as_pair(_require(world, "p_start", "world"), "world.p_start")),
            "p_end": list(_as_pair(_require(world, "p_end", "world"), "world.p_end")),
        }
    raise ConfigError(f"world.kind must be 'gaussian' or 'motion', got {kind!r}")


def _validate_seeds(seeds) -> tuple[int, ...]:
    if isinstance(seeds, dict):
        if set(seeds) - {"count", "base"}:
            raise ConfigError("seeds mapping accepts only {count, base}")
        count = _as_int(_require(seeds, "count", "seeds"), "seeds.count")
        base = _as_int(seeds.get("base", 0), "seeds.base")
        if count < 1:
            raise ConfigError(f"seeds.count must be >= 1, got {count}")
        return tuple(range(base, base + count))
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("seeds must be a non-empty list or a {count, base} mapping")
    return tuple(_as_int(s, "seeds[]") for s in seeds)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; plain data end to end.

    sweep maps knob names (gamma, k, lam, alpha) to value grids; run-style
    execution ignores it and sweep-style execution takes the product.
    """

    world: dict
    modes: tuple[str, ...]
    seeds: tuple[int, ...]
    sampler: dict = dataclasses.field(default_factory=dict)
    mode_overrides: dict = dataclasses.field(default_factory=dict)
    sweep: dict = dataclasses.field(default_factory=dict)
    out_dir: str = "runs"
    snapshots: tuple[float, ...] = ()
    jobs: int = 1
    bridge: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "world", _validate_world(self.world))
        if not self.modes:
            raise ConfigError("modes must name at least one sampler mode")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        object.__setattr__(self, "seeds", _validate_seeds(self.seeds))
        unknown = set(self.sampler) - _SAMPLER_KEYS
        if unknown:
            raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
        if not isinstance(self.mode_overrides, dict):
            raise ConfigError("mode_overrides must map mode names to sampler settings")
        for mode, block in self.mode_overrides.items():
            if mode not in MODES:
                raise ConfigError(f"mode_overrides names unknown mode {mode!r}")
            if not isinstance(block, dict):
                raise ConfigError(f"mode_overrides.{mode} must be a mapping")
            unknown = set(block) - _SAMPLER_KEYS
            if unknown:
                raise ConfigError(f"unknown sampler keys in mode_overrides.{mode}: {sorted(unknown)}")
        unknown = set(self.sweep) - _SWEEP_KEYS
        if unknown:
            raise ConfigError(f"sweep accepts {sorted(_SWEEP_KEYS)}, got extra {sorted(unknown)}")
        for key, values in self.sweep.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep.{key} must be a non-empty list")
        object.__setattr__(self, "sweep", {k: list(v) for k, v in sorted(self.sweep.items())})
        for frac in self.snapshots:
            if not 0.0 < float(frac) <= 1.0:
                raise ConfigError(f"snapshot fractions must lie in (0, 1], got {frac}")
        object.__setattr__(self, "snapshots", tuple(float(f) for f in self.snapshots))
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.bridge is not None:
            host, _, port = str(self.bridge).rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError(f"bridge must look like host:port, got {self.bridge!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        known = {
            "world",
            "modes",
            "seeds",
            "sampler",
            "mode_overrides",
            "sweep",
            "out_dir",
            "snapshots",
            "jobs",
            "bridge",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        modes = raw.get("modes")
        if isinstance(modes, str):
            modes = [modes]
        if not isinstance(modes, (list, tuple)):
            raise ConfigError("modes must be a mode name or a list of them")
        return cls(
            world=_require(raw, "world", "config"),
            modes=tuple(modes),
            seeds=_require(raw, "seeds", "config"),
            sampler=dict(raw.get("sampler") or {}),
            mode_overrides={
                k: dict(v) if isinstance(v, dict) else v
                for k, v in (raw.get("mode_overrides") or {}).items()
            },
            sweep=dict(raw.get("sweep") or {}),
            out_dir=str(raw.get("out_dir", "runs")),
            snapshots=tuple(raw.get("snapshots") or ()),
            jobs=int(raw.get("jobs", 1)),
            bridge=raw.get("bridge"),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "world": self.world,
            "modes": list(self.modes),
            "seeds": list(self.seeds),
            "sampler": dict(self.sampler),
            "mode_overrides": {k: dict(v) for k, v in sorted(self.mode_overrides.items())},
            "sweep": {k: list(v) for k, v in self.sweep.items()},
            "out_dir": self.out_dir,
            "snapshots": list(self.snapshots),
            "jobs": self.jobs,
            "bridge": self.bridge,
        }

    def canonical_yaml(self) -> str:
        """Stable text form: safe_dump with sorted keys is the one true
        serialization, so equal configs compare equal as strings."""
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _frame_array(value, shape, where: str) -> np.ndarray:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(shape, float(value))
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ConfigError(f"{where} must be a scalar fill or shape {tuple(shape)}, got {arr.shape}")
    return arr


def build_world(world: dict):
    if world["kind"] == "gaussian":
        mu = _frame_array(world["mu"], world["shape"], "world.mu")
        return GaussianWorldSpec(mu=mu, sigma_d=world["sigma_d"])
    return MotionWorldSpec(
        grid=tuple(world["grid"]),
        blob_sigma=world["blob_sigma"],
        n_frames=world["n_frames"],
        bias_velocity=tuple(world["bias_velocity"]),
        bias_strength=world["bias_strength"],
    )


def build_task(config: ExperimentConfig) -> SamplingTask:
    world = build_world(config.world)
    if config.world["kind"] == "gaussian":
        conds = config.world["conditions"]
        shape = config.world["shape"]
        start = conds.get("start")
        end = conds.get("end")
        task = gaussian_task(
            world,
            config.world["n_frames"],
            start_frame=None if start is None else _frame_array(start, shape, "conditions.start"),
            end_frame=None if end is None else _frame_array(end, shape, "conditions.end"),
        )
    else:
        task = motion_task(world, tuple(config.world["p_start"]), tuple(config.world["p_end"]))
    if config.bridge is not None:
        from .bridge_client import BridgeDenoiser

        task = dataclasses.replace(task, denoiser=BridgeDenoiser.from_endpoint(config.bridge))
    return task


def _parse_guidance(value, n_frames: int) -> GuidanceSpec | None:
    if value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return GuidanceSpec(float(value))
    if isinstance(value, (list, tuple)):
        vals = [_as_float(v, "sampler.guidance[]") for v in value]
        if len(vals) == 2:
            return GuidanceSpec.linear_ramp(vals[0], vals[1], n_frames)
        if len(vals) == n_frames:
            return GuidanceSpec(tuple(vals))
        raise ConfigError(
            f"sampler.guidance list must hold 2 ramp endpoints or {n_frames} per-frame weights"
        )
    raise ConfigError(f"sampler.guidance must be null, a number, or a list, got {value!r}")


def sampler_config_for(
    config: ExperimentConfig, mode: str, point: dict, seed: int
) -> SamplerConfig:
    """Mode defaults, then the sampler section, then per-mode overrides,
    then the gridpoint."""
    overrides = dict(config.sampler)
    overrides.update(config.mode_overrides.get(mode, {}))
    overrides.update(point)
    overrides["seed"] = int(seed)
    n_frames = config.world["n_frames"]
    if "guidance" in overrides:
        overrides["guidance"] = _parse_guidance(overrides["guidance"], n_frames)
    try:
        return SamplerConfig.defaults_for(mode, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad sampler settings for mode {mode}: {exc}") from exc


def gridpoints(sweep: dict) -> list[tuple[str, dict]]:
    """Expand sweep grids into labeled points; no grids means one 'base'."""
    if not sweep:
        return [("base", {})]
    keys = sorted(sweep)
    points = []
    for combo in product(*(sweep[k] for k in keys)):
        point = dict(zip(keys, combo))
        label = "_".join(f"{k}{_label_value(point[k])}" for k in keys)
        points.append((label, point))
    return points


def _label_value(value) -> str:
    if isinstance(value, str):
        return value
    return format(value, "g")


def snapshot_steps_for(fractions, steps: int) -> frozenset[int]:
    out = set()
    for frac in fractions:
        t = int(math.floor(frac * steps + 0.5))
        out.add(min(max(t, 1), steps))
    return frozenset(out)


# ---------------------------------------------------------------------------
# Single-run execution and scoring


def _score_run(task: SamplingTask, video: VideoLatent, trace) -> dict:
    metrics: dict = {}
    losses = [r.discrepancy_loss for r in trace]
    metrics["mean_discrepancy_loss"] = float(np.mean(losses)) if losses else 0.0
    if isinstance(task.world, MotionWorldSpec):
        report = score_video(video, task.world, task.c_start.latent, task.c_end.latent)
        metrics.update(report.to_dict())
    else:
        if task.c_start is not None:
            metrics["endpoint_mse_start"] = float(
                np.mean((video.data[0] - task.c_start.latent) ** 2)
            )
        if task.c_end is not None:
            metrics["endpoint_mse_end"] = float(np.mean((video.data[-1] - task.c_end.latent) ** 2))
    return metrics


def _write_run_dir(run_dir: Path, video: VideoLatent, trace, metrics: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    save_latent(video, run_dir / "video.lat")
    write_pgm_strip(video.data[:, 0], run_dir / "video.pgm")
    records = []
    for rec in trace:
        entry = {
            "t": rec.t,
            "sigma_t": rec.sigma_t,
            "discrepancy_loss": rec.discrepancy_loss,
            "denoiser_calls": rec.denoiser_calls,
        }
        snaps = {}
        for branch, latent in (("forward", rec.x0_forward), ("backward", rec.x0_backward)):
            if latent is None:
                continue
            rel = f"snapshots/t{rec.t:02d}_{branch}.lat"
            (run_dir / "snapshots").mkdir(exist_ok=True)
            save_latent(latent, run_dir / rel)
            snaps[branch] = rel
        if snaps:
            entry["snapshots"] = snaps
        records.append(entry)
    (run_dir / "trace.json").write_text(
        json.dumps({"records": records}, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (run_dir / "report.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    lines = [f"{key}={_fmt(metrics[key])}" for key in sorted(metrics)]
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return format(float(value), ".10g")


def _execute_run(payload) -> dict:
    """One (mode, gridpoint, seed) cell; top-level so pools can pickle it."""
    config_dict, mode, label, point, seed = payload
    config = ExperimentConfig.from_dict(config_dict)
    task = build_task(config)
    sampler_config = sampler_config_for(config, mode, point, seed)
    steps = snapshot_steps_for(config.snapshots, sampler_config.steps)
    video, trace = run_sampler(task, sampler_config, snapshot_steps=steps)
    metrics = _score_run(task, video, trace)
    rel_dir = f"{mode}/{label}/{seed}"
    _write_run_dir(Path(config.out_dir) / rel_dir, video, trace, metrics)
    closer = getattr(task.denoiser, "close", None)
    if closer is not None:
        closer()
    return {"mode": mode, "gridpoint": label, "seed": seed, "dir": rel_dir, **metrics}


def _execute_all(config: ExperimentConfig, points) -> list[dict]:
    payloads = [
        (config.to_dict(), mode, label, point, seed)
        for mode in config.modes
        for (label, point) in points
        for seed in config.seeds
    ]
    if config.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_execute_run, payloads))
    else:
        rows = [_execute_run(p) for p in payloads]
    expected = len(config.modes) * len(points) * len(config.seeds)
    if len(rows) != expected:
        raise RuntimeError(f"expected {expected} runs, collected {len(rows)}")
    return rows


def _aggregate(rows: list[dict], modes, points) -> list[dict]:
    cells = []
    for mode in modes:
        for label, _ in points:
            cell_rows = [r for r in rows if r["mode"] == mode and r["gridpoint"] == label]
            numeric: dict[str, list[float]] = {}
            degenerate = []
            for row in cell_rows:
                for key, value in row.items():
                    if key in ("mode", "gridpoint", "seed", "dir"):
                        continue
                    if key == "degenerate":
                        degenerate.append(bool(value))
                    else:
                        numeric.setdefault(key, []).append(float(value))
            cell = {
                "mode": mode,
                "gridpoint": label,
                "n_runs": len(cell_rows),
                "metrics": {
                    key: {
                        "mean": float(np.mean(vals)),
                        "std": float(np.std(vals)),
                    }
                    for key, vals in sorted(numeric.items())
                },
            }
            if degenerate:
                cell["degenerate_rate"] = float(np.mean(degenerate))
            cells.append(cell)
    return cells


def _write_report(out_dir: Path, name: str, report: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    lines = [f"runs={len(report['runs'])}"]
    for cell in report["cells"]:
        lines.append(f"cell mode={cell['mode']} point={cell['gridpoint']} n={cell['n_runs']}")
        for key, stats in cell["metrics"].items():
            lines.append(f"  {key} mean={_fmt(stats['mean'])} std={_fmt(stats['std'])}")
        if "degenerate_rate" in cell:
            lines.append(f"  degenerate_rate={_fmt(cell['degenerate_rate'])}")
    for pair, rates in report.get("win_rates", {}).items():
        rendered = " ".join(f"{k}={_fmt(v)}" for k, v in rates.items())
        lines.append(f"winrate {pair}: {rendered}")
    (out_dir / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_bridge(config: ExperimentConfig) -> None:
    if config.bridge is None:
        return
    from .bridge_client import BridgeDenoiser

    client = BridgeDenoiser.from_endpoint(config.bridge)
    try:
        client.ping()
    finally:
        client.close()


def run_experiment(config: ExperimentConfig, *, expand_sweep: bool = False) -> dict:
    """Execute every (mode, gridpoint, seed) cell and write the report.

    expand_sweep=False collapses the sweep section to the single base
    point; =True takes the full grid product.
    """
    _check_bridge(config)
    points = gridpoints(config.sweep if expand_sweep else {})
    rows = _execute_all(config, points)
    report = {
        "config": config.to_dict(),
        "cells": _aggregate(rows, config.modes, points),
        "runs": rows,
    }
    _write_report(Path(config.out_dir), "report", report)
    return report


# ---------------------------------------------------------------------------
# Conflict benchmark

_WIN_METRICS = {
    # metric -> True when larger is better
    "direction_consistency": True,
    "ghosting_score": False,
    "endpoint_mse_end": False,
}

_PAIRS = (("mpd+sequential", "sequential"), ("mpd+parallel", "parallel"))


def conflict_benchmark(config: ExperimentConfig) -> dict:
    """Head-to-head of the four two-sided modes on one conflicted world.

    Emits per-mode aggregates plus win rates of each distilled mode over
    its plain counterpart across the shared seeds. A zero-bias world makes
    the benchmark degenerate (nothing to disagree about); it still runs,
    with a warning.
    """
    if config.world["kind"] != "motion":
        raise ConfigError("conflict benchmark needs a motion world")
    if config.world["bias_strength"] == 0.0:
        warnings.warn(
            "bias_strength is 0: the conflict benchmark is degenerate and "
            "modes should tie on direction_consistency",
            RuntimeWarning,
            stacklevel=2,
        )
    _check_bridge(config)
    bench = dataclasses.replace(config, modes=CONFLICT_MODES, sweep={})
    points = gridpoints({})
    rows = _execute_all(bench, points)
    by_mode_seed = {(r["mode"], r["seed"]): r for r in rows}
    win_rates: dict[str, dict[str, float]] = {}
    for mpd_mode, base_mode in _PAIRS:
        rates = {}
        for metric, larger_wins in _WIN_METRICS.items():
            wins = 0
            for seed in bench.seeds:
                mpd = by_mode_seed[(mpd_mode, seed)]
                base = by_mode_seed[(base_mode, seed)]
                if mpd.get("degenerate"):
                    continue  # a run with no decodable blob never wins
                if larger_wins:
                    wins += mpd[metric] > base[metric]
                else:
                    wins += mpd[metric] < base[metric]
            rates[metric] = wins / len(bench.seeds)
        win_rates[f"{mpd_mode}_vs_{base_mode}"] = rates
    report = {
        "config": bench.to_dict(),
        "cells": _aggregate(rows, CONFLICT_MODES, points),
        "win_rates": win_rates,
        "runs": rows,
    }
    _write_report(Path(bench.out_dir), "bench_report", report)
    return report


# ---------------------------------------------------------------------------
# Reloading a run directory


def load_run_trace(run_dir) -> list[TraceRecord]:
    """Rebuild TraceRecords (snapshots included) from a run directory."""
    run_dir = Path(run_dir)
    trace_path = run_dir / "trace.json"
    if not trace_path.is_file():
        raise ConfigError(f"{run_dir} has no trace.json; is it a run directory?")
    raw = json.loads(trace_path.read_text(encoding="utf-8"))
    out = []
    for entry in raw["records"]:
        snaps = entry.get("snapshots", {})
        loaded = {
            branch: load_latent(run_dir / rel) for branch, rel in snaps.items()
        }
        out.append(
            TraceRecord(
                t=entry["t"],
                sigma_t=entry["sigma_t"],
                discrepancy_loss=entry["discrepancy_loss"],
                denoiser_calls=entry["denoiser_calls"],
                x0_forward=loaded.get("forward"),
                x0_backward=loaded.get("backward"),
            )
        )
    return out
