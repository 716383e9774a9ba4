"""Per-step traces, the two-path consistency loss, quality metrics for the
blob world, and mid-trajectory estimate dumps."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoisers import MotionWorldSpec, decode_blob_position
from .errors import DegenerateConditionError, SnapshotMissingError
from .latents import VideoLatent, save_latent

__all__ = [
    "TraceRecord",
    "QualityReport",
    "path_discrepancy_loss",
    "score_video",
    "dump_mid_estimates",
    "write_pgm_strip",
]


@dataclass
class TraceRecord:
    """One sampler step: noise level, two-path disagreement, call count,
    and (when snapshotting is on) the per-branch clean estimates."""

    t: int
    sigma_t: float
    discrepancy_loss: float
    denoiser_calls: int
    x0_forward: VideoLatent | None = None
    x0_backward: VideoLatent | None = None

    def __post_init__(self) -> None:
        if self.discrepancy_loss < 0.0:
            raise ValueError(f"loss must be >= 0, got {self.discrepancy_loss}")
        if (
            self.x0_forward is not None
            and self.x0_backward is not None
            and self.x0_forward.data.shape != self.x0_backward.data.shape
        ):
            raise ValueError("snapshot shapes disagree")


def path_discrepancy_loss(x0_a: VideoLatent, x0_b_flippedback: VideoLatent, sigma: float) -> float:
    """Squared disagreement between the two branch estimates, scaled 1/sigma^2."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a, b = x0_a.data, x0_b_flippedback.data
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sum(diff * diff) / (sigma * sigma))


@dataclass
class QualityReport:
    """Desk-scale stand-ins for perceptual video metrics.

    smoothness and direction_consistency live in decoded-trajectory space;
    endpoint MSEs live in latent space; ghosting counts excess strict local
    maxima per frame. degenerate flags frames with no decodable blob.
    """

    endpoint_mse_start: float
    endpoint_mse_end: float
    smoothness: float
    direction_consistency: float
    ghosting_score: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        for name in (
            "endpoint_mse_start",
            "endpoint_mse_end",
            "smoothness",
            "ghosting_score",
        ):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.direction_consistency <= 1.0:
            raise ValueError("direction_consistency must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "endpoint_mse_start": self.endpoint_mse_start,
            "endpoint_mse_end": self.endpoint_mse_end,
            "smoothness": self.smoothness,
            "direction_consistency": self.direction_consistency,
            "ghosting_score": self.ghosting_score,
            "degenerate": self.degenerate,
        }

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                lines.append(f"{key}={'true' if value else 'false'}")
            else:
                lines.append(f"{key}={value:.10g}")
        return "\n".join(lines) + "\n"


def _strict_local_maxima_count(frame: np.ndarray, threshold: float) -> int:
    """Count pixels strictly above all 8 neighbors and above threshold."""
    h, w = frame.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = frame
    center = padded[1:-1, 1:-1]
    is_max = center > threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= center > padded[1 + dy : h + 1 + dy, 1 + dx : w + 1 + dx]
    return int(is_max.sum())


def score_video(
    video: VideoLatent,
    world: MotionWorldSpec,
    z_start: np.ndarray,
    z_end: np.ndarray,
) -> QualityReport:
    """Score a single-channel blob video against its endpoint targets."""
    n, c, h, w = video.data.shape
    if c != 1 or (h, w) != world.grid:
        raise ValueError(f"video {video.data.shape} does not match world grid {world.grid}")
    start = np.asarray(z_start, dtype=np.float64).reshape(world.grid)
    end = np.asarray(z_end, dtype=np.float64).reshape(world.grid)
    frames = video.data[:, 0]

    mse_start = float(np.mean((frames[0] - start) ** 2))
    mse_end = float(np.mean((frames[-1] - end) ** 2))

    degenerate = False
    positions = []
    for i in range(n):
        try:
            positions.append(decode_blob_position(frames[i], world))
        except DegenerateConditionError:
            degenerate = True
            break

    if degenerate:
        smoothness = 0.0
        direction = 0.0
    else:
        track = np.stack(positions)
        accel = np.diff(track, n=2, axis=0)
        smoothness = float(np.mean(np.sum(accel * accel, axis=1))) if len(accel) else 0.0
        target = decode_blob_position(end, world) - decode_blob_position(start, world)
        moves = np.diff(track, axis=0)
        direction = float(np.mean(moves @ target > 0.0))

    peak = float(frames.max())
    if peak <= 0.0:
        ghost = 0.0
        degenerate = True
    else:
        threshold = 0.5 * peak
        counts = [_strict_local_maxima_count(frames[i], threshold) for i in range(n)]
        ghost = max(float(np.mean(counts)) - 1.0, 0.0)

    return QualityReport(
        endpoint_mse_start=mse_start,
        endpoint_mse_end=mse_end,
        smoothness=smoothness,
        direction_consistency=direction,
        ghosting_score=ghost,
        degenerate=degenerate,
    )


def write_pgm_strip(frames: np.ndarray, path) -> Path:
    """Write frames as one horizontal 8-bit P5 strip, min-max normalized
    over the whole array. Accepts (H, W) or (N, H, W)."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (N, H, W) frames, got {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    quantized = ((arr - lo) * scale).round().astype(np.uint8)
    strip = np.concatenate(list(quantized), axis=1)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{strip.shape[1]} {strip.shape[0]}\n255\n".encode("ascii"))
        fh.write(strip.tobytes())
    return path


def dump_mid_estimates(
    trace: list[TraceRecord], at_fraction: float, out_dir, stem: str = "mid"
) -> list[Path]:
    """Write the recorded per-branch clean estimates nearest at_fraction of
    the way down the schedule (half-up rounding of at_fraction * T).

    Emits a latent dump plus a PGM filmstrip (channel 0) per recorded
    branch. Raises SnapshotMissingError when the selected step was not
    snapshotted.
    """
    if not trace:
        raise SnapshotMissingError("empty trace")
    if not 0.0 < at_fraction < 1.0 + 1e-12:
        raise ValueError(f"at_fraction must lie in (0, 1], got {at_fraction}")
    total = max(r.t for r in trace)
    t_sel = int(np.floor(at_fraction * total + 0.5))
    t_sel = min(max(t_sel, 1), total)
    record = next((r for r in trace if r.t == t_sel), None)
    if record is None:
        raise SnapshotMissingError(f"trace has no record for step {t_sel}")
    branches = [("forward", record.x0_forward), ("backward", record.x0_backward)]
    if all(latent is None for _, latent in branches):
        raise SnapshotMissingError(
            f"step {t_sel} was not snapshotted; rerun with snapshot_steps including it"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, latent in branches:
        if latent is None:
            continue
        base = out_dir / f"{stem}_t{t_sel:02d}_{name}"
        lat_path = base.with_suffix(".lat")
        save_latent(latent, lat_path)
        written.append(lat_path)
        written.append(write_pgm_strip(latent.data[:, 0], base.with_suffix(".pgm")))
    return written
