"""Motion prior distillation.

The early, high-noise steps replace the backward denoiser call with an
algebraic reconstruction: take the forward path's per-transition noise
residuals, flip time, anchor the first flipped frame on the end target,
and integrate the residuals back out. The reconstruction is fused with the
forward conditional estimate and the latent is updated with the
unconditional-anchored Euler step, re-noising between the k inner passes.
Later steps hand off to one of the plain time-reversal samplers.

Index bookkeeping (1-indexed frames, N of them): flipped frame i is
original frame N+1-i. The reconstruction anchors flipped frame 1 (the
original last frame) exactly onto the end target, and its transitions mix
the local input residual with the mirrored conditional-estimate residual;
the delta identity is property-tested rather than trusted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoisers import Denoiser, FrameCondition
from .diagnostics import TraceRecord, path_discrepancy_loss
from .latents import (
    NoiseSchedule,
    ResidualStack,
    RngStream,
    VideoLatent,
    frame_residual,
    temporal_flip,
)
from .stepper import euler_step_uncond_anchor, renoise

__all__ = [
    "MpdPhasePlan",
    "plan_phases",
    "forward_noise_residual",
    "init_backward_eps",
    "reconstruct_backward_eps",
    "reconstruct_backward_estimate",
    "fuse_estimates",
    "mpd_step",
    "mpd_sample",
]

_TAIL_MODES = ("parallel", "sequential")

# Guards float dust in (1 - gamma) * steps when the product is an exact
# integer in real arithmetic.
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class MpdPhasePlan:
    """Which steps distill, and which baseline finishes the schedule."""

    distill_steps: tuple[int, ...]
    tail_mode: str

    def __post_init__(self) -> None:
        if self.tail_mode not in _TAIL_MODES:
            raise ValueError(f"tail_mode must be one of {_TAIL_MODES}")
        steps = self.distill_steps
        if any(steps[i] - 1 != steps[i + 1] for i in range(len(steps) - 1)):
            raise ValueError("distill_steps must be contiguous and descending")

    def is_distill(self, t: int) -> bool:
        return bool(self.distill_steps) and self.distill_steps[-1] <= t <= self.distill_steps[0]


def plan_phases(steps: int, gamma: float, tail_mode: str) -> MpdPhasePlan:
    """Distillation runs from step T down to ceil((1-gamma)*T), inclusive;
    gamma=0 disables it entirely and gamma=1 covers every step."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if tail_mode.startswith("mpd+"):
        tail_mode = tail_mode.split("+", 1)[1]
    if gamma == 0.0:
        return MpdPhasePlan((), tail_mode)
    bound = max(math.ceil((1.0 - gamma) * steps - _BOUNDARY_EPS), 1)
    return MpdPhasePlan(tuple(range(steps, bound - 1, -1)), tail_mode)


def forward_noise_residual(
    dx_t: ResidualStack, dx0: ResidualStack, sigma: float
) -> ResidualStack:
    """Per-transition noise increments: (input residuals - estimate
    residuals) / sigma."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if dx_t.deltas.shape != dx0.deltas.shape:
        raise ValueError(
            f"residual stacks disagree: {dx_t.deltas.shape} vs {dx0.deltas.shape}"
        )
    return ResidualStack((dx_t.deltas - dx0.deltas) / sigma)


def init_backward_eps(
    x_flipped_frame1: np.ndarray, z_end: np.ndarray, sigma: float
) -> np.ndarray:
    """Noise implied by anchoring the first flipped frame on the end target."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = np.asarray(x_flipped_frame1, dtype=np.float64)
    b = np.asarray(z_end, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return (a - b) / sigma


def reconstruct_backward_eps(eps1: np.ndarray, delta_eps_fwd: ResidualStack) -> VideoLatent:
    """Integrate the increments out from the anchor: frame 1 is eps1, and
    each later frame subtracts the next increment cumulatively."""
    eps1 = np.asarray(eps1, dtype=np.float64)
    deltas = delta_eps_fwd.deltas
    if deltas.shape[1:] != eps1.shape:
        raise ValueError(
            f"delta frames {deltas.shape[1:]} do not match eps1 {eps1.shape}"
        )
    running = eps1[None] - np.cumsum(deltas, axis=0)
    return VideoLatent(np.concatenate([eps1[None], running], axis=0))


def reconstruct_backward_estimate(
    x_flipped: VideoLatent, eps_bwd: VideoLatent, sigma: float
) -> VideoLatent:
    """Denoised reconstruction of the flipped latent from the rebuilt noise."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x_flipped.data.shape != eps_bwd.data.shape:
        raise ValueError(
            f"shape mismatch: {x_flipped.data.shape} vs {eps_bwd.data.shape}"
        )
    return VideoLatent(x_flipped.data - sigma * eps_bwd.data)


def fuse_estimates(
    x0_fwd: VideoLatent, x0_bwd_flippedback: VideoLatent, lam: float
) -> VideoLatent:
    """Convex blend: lam weights the reconstructed (backward) estimate."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    a, b = x0_fwd.data, x0_bwd_flippedback.data
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return VideoLatent((1.0 - lam) * a + lam * b)


def mpd_step(
    x_t: VideoLatent,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    t: int,
    c_start: FrameCondition | None,
    z_end: np.ndarray,
    config,
    rng: RngStream,
    trace: list[TraceRecord] | None = None,
    snapshot: bool = False,
) -> VideoLatent:
    """One distillation step: k inner passes of denoise / reconstruct /
    fuse / anchored update, re-noising back up between passes and
    descending on the last. The end target enters only through the
    reconstruction algebra; the denoiser never sees an end condition here.
    """
    sigma_t, sigma_prev = schedule.sigma(t), schedule.sigma(t - 1)
    x = x_t
    fwd_est = bwd_est = None
    for j in range(config.k):
        pair = denoiser(x, sigma_t, c_start)
        d_eps = forward_noise_residual(
            frame_residual(x), frame_residual(pair.cond), sigma_t
        )
        x_flip = temporal_flip(x)
        eps1 = init_backward_eps(x_flip.frame(0), z_end, sigma_t)
        eps_bwd = reconstruct_backward_eps(eps1, d_eps)
        recon = reconstruct_backward_estimate(x_flip, eps_bwd, sigma_t)
        bwd_est = temporal_flip(recon)
        fwd_est = pair.cond
        fused = fuse_estimates(fwd_est, bwd_est, config.lam)
        stepped = euler_step_uncond_anchor(x, fused, pair.uncond, sigma_t, sigma_prev)
        if j < config.k - 1:
            x = renoise(stepped, sigma_t, sigma_prev, rng)
        else:
            x = stepped
    if trace is not None:
        trace.append(
            TraceRecord(
                t=t,
                sigma_t=sigma_t,
                discrepancy_loss=path_discrepancy_loss(fwd_est, bwd_est, sigma_t),
                denoiser_calls=config.k,
                x0_forward=fwd_est if snapshot else None,
                x0_backward=bwd_est if snapshot else None,
            )
        )
    return x


def mpd_sample(
    task,
    config,
    snapshot_steps: frozenset[int] | set[int] = frozenset(),
) -> tuple[VideoLatent, list[TraceRecord]]:
    """Distill the early steps, then finish with the configured baseline."""
    from .samplers import _initial_latent, trf_step, vibid_step

    if config.mode not in ("mpd+parallel", "mpd+sequential"):
        raise ValueError(f"mpd_sample needs an mpd mode, got {config.mode!r}")
    plan = plan_phases(config.steps, config.gamma, config.mode)
    c_end = task.require_end()
    z_end = task.z_end()
    tail = trf_step if plan.tail_mode == "parallel" else vibid_step

    rng = RngStream(seed=config.seed)
    schedule = config.schedule()
    snapshot_steps = frozenset(snapshot_steps)
    trace: list[TraceRecord] = []
    x = _initial_latent(schedule, rng, task.n_frames, task.frame_shape)
    for t, _, _ in schedule.descending_steps():
        if plan.is_distill(t):
            x = mpd_step(
                x,
                task.denoiser,
                schedule,
                t,
                task.c_start,
                z_end,
                config,
                rng,
                trace=trace,
                snapshot=t in snapshot_steps,
            )
        else:
            x = tail(
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
