"""Forward and time-reversal samplers over the pluggable denoiser contract.

Three loop bodies share the same primitives:

- forward: denoise with the start condition, guide, Euler down. The plain
  image-to-video baseline.
- parallel fusion: run the forward branch and, independently, the same
  update on the time-flipped latent conditioned on the end frame; blend the
  two results frame-wise with weight alpha.
- sequential alternation: forward update, re-noise back up to the current
  level, then the backward (flipped) update from the re-noised latent.

All randomness flows through one RngStream per run: the initial draw first,
then any per-step re-noise draws in loop order, so runs replay exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .denoisers import Denoiser, FrameCondition, GaussianWorldSpec, MotionWorldSpec
from .diagnostics import TraceRecord, path_discrepancy_loss
from .latents import NoiseSchedule, RngStream, VideoLatent, build_schedule, temporal_flip
from .stepper import GuidanceSpec, apply_cfg, euler_step, renoise

__all__ = [
    "MODES",
    "SamplerConfig",
    "SamplingTask",
    "gaussian_task",
    "motion_task",
    "forward_sample",
    "trf_step",
    "vibid_step",
    "run_sampler",
]

MODES = ("forward-only", "parallel", "sequential", "mpd+parallel", "mpd+sequential")

# Per-mode defaults for the distillation knobs, frozen from the ablation
# optima used throughout the test suite.
_MODE_DEFAULTS = {
    "mpd+sequential": {"gamma": 0.2, "k": 3, "lam": 1.0},
    "mpd+parallel": {"gamma": 0.3, "k": 2, "lam": 0.5},
}


@dataclass(frozen=True)
class SamplerConfig:
    """Every sampling knob in one immutable record.

    guidance=None means the per-frame default ramp (1.0 at the first frame
    to 3.0 at the last). alpha is the parallel fusion weight: a scalar, or
    the string "ramp" for the frame-indexed schedule that favors the
    forward branch early in the clip and the backward branch late.
    """

    steps: int = 25
    guidance: GuidanceSpec | None = None
    alpha: float | str = 0.5
    lam: float = 0.0
    k: int = 1
    gamma: float = 0.0
    mode: str = "forward-only"
    seed: int = 0
    sigma_min: float = 0.002
    sigma_max: float = 700.0
    rho: float = 7.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if isinstance(self.alpha, str):
            if self.alpha != "ramp":
                raise ValueError(f"alpha must be a scalar or 'ramp', got {self.alpha!r}")
        elif not 0.0 <= float(self.alpha) <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @classmethod
    def defaults_for(cls, mode: str, **overrides) -> "SamplerConfig":
        base = dict(_MODE_DEFAULTS.get(mode, {}))
        base["mode"] = mode
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(
            self.steps, sigma_min=self.sigma_min, sigma_max=self.sigma_max, rho=self.rho
        )

    def guidance_for(self, n_frames: int) -> GuidanceSpec:
        if self.guidance is not None:
            return self.guidance
        return GuidanceSpec.linear_ramp(1.0, 3.0, n_frames)

    def alpha_weights(self, n_frames: int) -> np.ndarray:
        """Fusion weights as (N, 1, 1, 1); 'ramp' runs 1 down to 0."""
        if self.alpha == "ramp":
            idx = np.arange(1, n_frames + 1, dtype=np.float64)
            w = (n_frames - idx) / (n_frames - 1)
        else:
            w = np.full(n_frames, float(self.alpha))
        return w.reshape(n_frames, 1, 1, 1)


@dataclass(frozen=True)
class SamplingTask:
    """A prepared sampling problem: denoiser plus endpoint conditions.

    ``world`` and the endpoint metadata are carried for scoring and
    reporting; samplers consume only the denoiser and the conditions.
    """

    denoiser: Denoiser
    n_frames: int
    frame_shape: tuple[int, int, int]
    c_start: FrameCondition | None = None
    c_end: FrameCondition | None = None
    world: object | None = None
    p_start: tuple[float, float] | None = None
    p_end: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.n_frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.n_frames}")
        if len(self.frame_shape) != 3:
            raise ValueError(f"frame_shape must be (C, H, W), got {self.frame_shape}")

    def require_end(self) -> FrameCondition:
        if self.c_end is None:
            raise ValueError("this sampling mode needs an end-frame condition")
        return self.c_end

    def z_end(self) -> np.ndarray:
        return self.require_end().latent


def gaussian_task(
    world: GaussianWorldSpec,
    n_frames: int,
    start_frame: np.ndarray | None = None,
    end_frame: np.ndarray | None = None,
) -> SamplingTask:
    from .denoisers import GaussianDenoiser

    c_start = None if start_frame is None else FrameCondition(start_frame, "start")
    c_end = None if end_frame is None else FrameCondition(end_frame, "end")
    return SamplingTask(
        denoiser=GaussianDenoiser(world),
        n_frames=n_frames,
        frame_shape=world.mu.shape,
        c_start=c_start,
        c_end=c_end,
        world=world,
    )


def motion_task(
    world: MotionWorldSpec,
    p_start: tuple[float, float],
    p_end: tuple[float, float],
) -> SamplingTask:
    from .denoisers import ShiftWorldDenoiser, render_frame

    start = render_frame(world, np.asarray(p_start, dtype=np.float64))[None]
    end = render_frame(world, np.asarray(p_end, dtype=np.float64))[None]
    h, w = world.grid
    return SamplingTask(
        denoiser=ShiftWorldDenoiser(world),
        n_frames=world.n_frames,
        frame_shape=(1, h, w),
        c_start=FrameCondition(start, "start"),
        c_end=FrameCondition(end, "end"),
        world=world,
        p_start=(float(p_start[0]), float(p_start[1])),
        p_end=(float(p_end[0]), float(p_end[1])),
    )


def _initial_latent(
    schedule: NoiseSchedule, rng: RngStream, n_frames: int, frame_shape: tuple
) -> VideoLatent:
    sigma_top = schedule.sigma(schedule.n_steps)
    return VideoLatent(sigma_top * rng.normal((n_frames, *frame_shape)))


def forward_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    c_start: FrameCondition | None,
    config: SamplerConfig,
    rng: RngStream,
    *,
    n_frames: int,
    frame_shape: tuple | None = None,
    trace: list[TraceRecord] | None = None,
    snapshot_steps: frozenset[int] | set[int] = frozenset(),
) -> VideoLatent:
    """Plain start-conditioned sampling down the whole schedule."""
    if frame_shape is None:
        if c_start is None:
            raise ValueError("frame_shape is required when no start condition is given")
        frame_shape = c_start.latent.shape
    guidance = config.guidance_for(n_frames)
    x = _initial_latent(schedule, rng, n_frames, frame_shape)
    for t, sigma_t, sigma_prev in schedule.descending_steps():
        pair = denoiser(x, sigma_t, c_start)
        fused = apply_cfg(pair, guidance)
        x = euler_step(x, fused, sigma_t, sigma_prev)
        if trace is not None:
            keep = t in snapshot_steps
            trace.append(
                TraceRecord(
                    t=t,
                    sigma_t=sigma_t,
                    discrepancy_loss=0.0,
                    denoiser_calls=1,
                    x0_forward=fused if keep else None,
                    x0_backward=None,
                )
            )
    return x


def trf_step(
    x_t: VideoLatent,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    t: int,
    c_start: FrameCondition | None,
    c_end: FrameCondition,
    config: SamplerConfig,
    rng: RngStream,
    trace: list[TraceRecord] | None = None,
    snapshot: bool = False,
) -> VideoLatent:
    """Parallel-fusion update: forward and flipped-backward Euler branches
    blended frame-wise by alpha. Consumes no randomness."""
    sigma_t, sigma_prev = schedule.sigma(t), schedule.sigma(t - 1)
    n = x_t.n_frames
    guidance = config.guidance_for(n)

    pair_f = denoiser(x_t, sigma_t, c_start)
    fused_f = apply_cfg(pair_f, guidance)
    x_fwd = euler_step(x_t, fused_f, sigma_t, sigma_prev)

    flipped = temporal_flip(x_t)
    pair_b = denoiser(flipped, sigma_t, c_end)
    fused_b = apply_cfg(pair_b, guidance)
    x_bwd = temporal_flip(euler_step(flipped, fused_b, sigma_t, sigma_prev))

    alpha = config.alpha_weights(n)
    out = VideoLatent(alpha * x_fwd.data + (1.0 - alpha) * x_bwd.data)
    if trace is not None:
        bwd_est = temporal_flip(fused_b)
        trace.append(
            TraceRecord(
                t=t,
                sigma_t=sigma_t,
                discrepancy_loss=path_discrepancy_loss(fused_f, bwd_est, sigma_t),
                denoiser_calls=2,
                x0_forward=fused_f if snapshot else None,
                x0_backward=bwd_est if snapshot else None,
            )
        )
    return out


def vibid_step(
    x_t: VideoLatent,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    t: int,
    c_start: FrameCondition | None,
    c_end: FrameCondition,
    config: SamplerConfig,
    rng: RngStream,
    trace: list[TraceRecord] | None = None,
    snapshot: bool = False,
) -> VideoLatent:
    """Sequential update: forward step, re-noise back to the current level,
    then the backward step on the flipped latent. One draw per step."""
    sigma_t, sigma_prev = schedule.sigma(t), schedule.sigma(t - 1)
    n = x_t.n_frames
    guidance = config.guidance_for(n)

    pair_f = denoiser(x_t, sigma_t, c_start)
    fused_f = apply_cfg(pair_f, guidance)
    x_fwd = euler_step(x_t, fused_f, sigma_t, sigma_prev)

    lifted = renoise(x_fwd, sigma_t, sigma_prev, rng)

    flipped = temporal_flip(lifted)
    pair_b = denoiser(flipped, sigma_t, c_end)
    fused_b = apply_cfg(pair_b, guidance)
    out = temporal_flip(euler_step(flipped, fused_b, sigma_t, sigma_prev))

    if trace is not None:
        bwd_est = temporal_flip(fused_b)
        trace.append(
            TraceRecord(
                t=t,
                sigma_t=sigma_t,
                discrepancy_loss=path_discrepancy_loss(fused_f, bwd_est, sigma_t),
                denoiser_calls=2,
                x0_forward=fused_f if snapshot else None,
                x0_backward=bwd_est if snapshot else None,
            )
        )
    return out


def run_sampler(
    task: SamplingTask,
    config: SamplerConfig,
    snapshot_steps: frozenset[int] | set[int] = frozenset(),
) -> tuple[VideoLatent, list[TraceRecord]]:
    """Dispatch on config.mode and run the full schedule.

    Returns the final video and one TraceRecord per step. Snapshots of the
    per-branch clean estimates are kept only for steps in snapshot_steps.
    """
    rng = RngStream(seed=config.seed)
    schedule = config.schedule()
    trace: list[TraceRecord] = []
    snapshot_steps = frozenset(snapshot_steps)

    if config.mode == "forward-only":
        x = forward_sample(
            task.denoiser,
            schedule,
            task.c_start,
            config,
            rng,
            n_frames=task.n_frames,
            frame_shape=task.frame_shape,
            trace=trace,
            snapshot_steps=snapshot_steps,
        )
        return x, trace

    if config.mode in ("mpd+parallel", "mpd+sequential"):
        from .distill import mpd_sample

        return mpd_sample(task, config, snapshot_steps=snapshot_steps)

    c_end = task.require_end()
    step = trf_step if config.mode == "parallel" else vibid_step
    x = _initial_latent(schedule, rng, task.n_frames, task.frame_shape)
    for t, _, _ in schedule.descending_steps():
        x = step(
            x,
            task.denoiser,
            schedule,
            t,
            task.c_start,
            c_end,
            config,
            rng,
            trace=trace,
            snapshot=t in snapshot_steps,
        )
    return x, trace


def flipped_task(task: SamplingTask) -> SamplingTask:
    """The mirror problem: swap the endpoint conditions (and any endpoint
    metadata). Used by the flip-covariance checks."""
    swap_start = (
        None
        if task.c_end is None
        else FrameCondition(task.c_end.latent, "start")
    )
    swap_end = (
        None
        if task.c_start is None
        else FrameCondition(task.c_start.latent, "end")
    )
    return replace(
        task, c_start=swap_start, c_end=swap_end, p_start=task.p_end, p_end=task.p_start
    )
