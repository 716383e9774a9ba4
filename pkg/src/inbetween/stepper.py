"""Deterministic denoising-step primitives and guidance.

All steps operate on whole video latents at a shared noise level sigma. A
denoiser returns a (unconditional, conditional) estimate pair of the clean
video; everything downstream is plain frame-wise arithmetic:

    eps    = (x_t - x0_hat) / sigma          noise estimate
    score  = -eps / sigma                     gradient of log density
    euler  : x0_hat + (sigma_prev / sigma_t) * (x_t - x0_hat)
    renoise: x_prev + sqrt(sigma_t^2 - sigma_prev^2) * N(0, I)

Euler steps require strictly decreasing levels; re-noising allows equal
levels (then it is the identity and consumes no randomness).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latents import RngStream, VideoLatent

__all__ = [
    "DenoisedPair",
    "GuidanceSpec",
    "eps_and_score",
    "apply_cfg",
    "euler_step",
    "euler_step_uncond_anchor",
    "renoise",
]


@dataclass(frozen=True)
class DenoisedPair:
    """Unconditional and conditional clean-video estimates at one noise level."""

    uncond: VideoLatent
    cond: VideoLatent

    def __post_init__(self) -> None:
        if self.uncond.data.shape != self.cond.data.shape:
            raise ValueError(
                f"estimate shapes differ: {self.uncond.data.shape} vs {self.cond.data.shape}"
            )


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance strength: one scalar or one weight per frame.

    Weights must be >= 0. ``linear_ramp`` builds the per-frame default that
    leans harder on the condition toward the far end of the video.
    """

    w: float | tuple[float, ...] = 1.0

    def __post_init__(self) -> None:
        if isinstance(self.w, (int, float)):
            if self.w < 0:
                raise ValueError(f"guidance weight must be >= 0, got {self.w}")
            object.__setattr__(self, "w", float(self.w))
        else:
            ws = tuple(float(v) for v in self.w)
            if not ws:
                raise ValueError("per-frame guidance needs at least one weight")
            if any(v < 0 for v in ws):
                raise ValueError(f"guidance weights must be >= 0, got {ws}")
            object.__setattr__(self, "w", ws)

    @classmethod
    def linear_ramp(cls, lo: float, hi: float, n_frames: int) -> "GuidanceSpec":
        return cls(tuple(np.linspace(lo, hi, n_frames)))

    def weights(self, n_frames: int) -> np.ndarray:
        """Per-frame weights shaped (n_frames, 1, 1, 1) for broadcasting."""
        if isinstance(self.w, float):
            arr = np.full(n_frames, self.w)
        else:
            if len(self.w) != n_frames:
                raise ValueError(f"guidance has {len(self.w)} weights for {n_frames} frames")
            arr = np.asarray(self.w)
        return arr.reshape(n_frames, 1, 1, 1)


def eps_and_score(
    x_t: VideoLatent, x0_hat: VideoLatent, sigma: float
) -> tuple[VideoLatent, VideoLatent]:
    """Noise estimate and score implied by a clean estimate at level sigma."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x_t.data.shape != x0_hat.data.shape:
        raise ValueError(f"shape mismatch: {x_t.data.shape} vs {x0_hat.data.shape}")
    eps = (x_t.data - x0_hat.data) / sigma
    return VideoLatent(eps), VideoLatent(-eps / sigma)


def apply_cfg(pair: DenoisedPair, guidance: GuidanceSpec) -> VideoLatent:
    """Sharpen the conditional estimate: (1 + w) * cond - w * uncond."""
    w = guidance.weights(pair.cond.n_frames)
    return VideoLatent((1.0 + w) * pair.cond.data - w * pair.uncond.data)


def _check_step_levels(sigma_t: float, sigma_prev: float) -> None:
    if not sigma_t > sigma_prev:
        raise ValueError(f"need sigma_t > sigma_prev, got {sigma_t} <= {sigma_prev}")
    if sigma_prev < 0.0:
        raise ValueError(f"sigma_prev must be >= 0, got {sigma_prev}")


def euler_step(
    x_t: VideoLatent, x0_hat: VideoLatent, sigma_t: float, sigma_prev: float
) -> VideoLatent:
    """Move from level sigma_t to sigma_prev along the line toward x0_hat."""
    _check_step_levels(sigma_t, sigma_prev)
    ratio = sigma_prev / sigma_t
    return VideoLatent(x0_hat.data + ratio * (x_t.data - x0_hat.data))


def euler_step_uncond_anchor(
    x_t: VideoLatent,
    x0_fused: VideoLatent,
    x0_uncond: VideoLatent,
    sigma_t: float,
    sigma_prev: float,
) -> VideoLatent:
    """Euler update whose drift direction uses the unconditional estimate
    while the destination is the (fused) guided estimate."""
    _check_step_levels(sigma_t, sigma_prev)
    ratio = sigma_prev / sigma_t
    return VideoLatent(x0_fused.data + ratio * (x_t.data - x0_uncond.data))


def renoise(
    x_prev: VideoLatent, sigma_t: float, sigma_prev: float, rng: RngStream
) -> VideoLatent:
    """Lift a latent from level sigma_prev back up to sigma_t with fresh noise.

    Equal levels are allowed and return the input untouched without drawing
    from the stream, so replayability is unaffected.
    """
    if sigma_prev < 0.0 or sigma_t < sigma_prev:
        raise ValueError(f"need sigma_t >= sigma_prev >= 0, got {sigma_t}, {sigma_prev}")
    if sigma_t == sigma_prev:
        return x_prev
    amp = float(np.sqrt(sigma_t * sigma_t - sigma_prev * sigma_prev))
    return VideoLatent(x_prev.data + amp * rng.normal(x_prev.data.shape))
