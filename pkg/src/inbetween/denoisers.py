"""Analytic toy denoisers used to exercise the samplers at desk scale.

Two worlds are provided:

- Gaussian world: every frame is drawn from N(mu, sigma_d^2 I). The exact
  posterior mean under noise level sigma is the shrinkage blend
  (sigma_d^2 * x + sigma^2 * mu) / (sigma_d^2 + sigma^2); conditioning pins
  the first frame's prior mean to the condition latent.
- Shift world: each clean video renders a single Gaussian blob moving at a
  constant velocity. Denoising fits (p1, v) to the noisy input by penalized
  least squares and blends the input with the fitted rendering. The penalty
  beta * sigma^2 * ||v - bias_velocity||^2 encodes a directional prior that
  dominates when noise is high and washes out as sigma -> 0, which is what
  makes backward-conditioned sampling drift against the true motion.

Positions and velocities are (x, y) pairs: x indexes columns, y indexes
rows, both in pixels. Conditioning works through a single frame latent; in
these worlds the condition *is* a clean frame of the world.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from .errors import DegenerateConditionError
from .latents import VideoLatent
from .stepper import DenoisedPair

__all__ = [
    "FrameCondition",
    "GaussianWorldSpec",
    "MotionWorldSpec",
    "Denoiser",
    "GaussianDenoiser",
    "ShiftWorldDenoiser",
    "CallAuditor",
    "gaussian_denoise",
    "render_frame",
    "render_track",
    "decode_blob_position",
    "fit_blob_track",
    "TrackFit",
    "RESIDUAL_FLOOR",
]

# Effective prior scale never drops below this, keeping blends defined when
# the fit explains the input exactly.
RESIDUAL_FLOOR = 1e-3

# Ceiling multiple on the per-pixel RMS of one rendered blob frame. The
# largest residual a clean world video can leave against a candidate track
# is a complete blob miss (true blob plus spurious render, disjoint), whose
# RMS is sqrt(2) times a single blob's. Residual structure beyond that bound
# cannot be world content and is attributed to noise in the input.
_CEILING_GAIN = float(np.sqrt(2.0))

# Integer velocity search radius, pixels per frame, per axis.
_V_RADIUS = 4

_ROLES = ("start", "end")


@dataclass(frozen=True)
class FrameCondition:
    """A single conditioning frame and which endpoint of the video it pins."""

    latent: np.ndarray
    role: str

    def __post_init__(self) -> None:
        arr = np.array(self.latent, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"condition latent must be (C, H, W), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("condition latent contains non-finite values")
        if self.role not in _ROLES:
            raise ValueError(f"condition role must be one of {_ROLES}, got {self.role!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "latent", arr)


class Denoiser(Protocol):
    def __call__(
        self, x_t: VideoLatent, sigma: float, cond: FrameCondition | None
    ) -> DenoisedPair: ...


@dataclass(frozen=True)
class GaussianWorldSpec:
    """Frame-wise Gaussian prior: mean frame mu, scale sigma_d."""

    mu: np.ndarray
    sigma_d: float

    def __post_init__(self) -> None:
        arr = np.array(self.mu, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"mu must be a single (C, H, W) frame, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("mu contains non-finite values")
        if self.sigma_d <= 0.0:
            raise ValueError(f"sigma_d must be positive, got {self.sigma_d}")
        arr.setflags(write=False)
        object.__setattr__(self, "mu", arr)


@dataclass(frozen=True)
class MotionWorldSpec:
    """Single-blob constant-velocity world on an H x W grid.

    bias_velocity (pixels/frame, (vx, vy)) with bias_strength >= 0 defines
    the directional prior applied to every trajectory fit.
    """

    grid: tuple[int, int]
    blob_sigma: float
    n_frames: int
    bias_velocity: tuple[float, float]
    bias_strength: float

    def __post_init__(self) -> None:
        h, w = self.grid
        if h < 8 or w < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.grid}")
        if self.blob_sigma <= 0.0:
            raise ValueError(f"blob_sigma must be positive, got {self.blob_sigma}")
        if self.n_frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.n_frames}")
        if self.bias_strength < 0.0:
            raise ValueError(f"bias_strength must be >= 0, got {self.bias_strength}")
        object.__setattr__(self, "grid", (int(h), int(w)))
        object.__setattr__(
            self, "bias_velocity", (float(self.bias_velocity[0]), float(self.bias_velocity[1]))
        )


def gaussian_denoise(
    x_t: VideoLatent, sigma: float, cond: FrameCondition | None, world: GaussianWorldSpec
) -> DenoisedPair:
    """Exact posterior-mean pair for the Gaussian world.

    The conditional branch replaces the first frame's prior mean with the
    condition latent; all other frames share the unconditional posterior.
    """
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if x_t.frame_shape != world.mu.shape:
        raise ValueError(f"frame shape {x_t.frame_shape} does not match mu {world.mu.shape}")
    sd2 = world.sigma_d**2
    s2 = sigma * sigma
    w = sd2 / (sd2 + s2)
    uncond = w * x_t.data + (1.0 - w) * world.mu
    if cond is None:
        cond_est = uncond
    else:
        if cond.latent.shape != world.mu.shape:
            raise ValueError(
                f"condition shape {cond.latent.shape} does not match mu {world.mu.shape}"
            )
        cond_est = uncond.copy()
        cond_est[0] = w * x_t.data[0] + (1.0 - w) * cond.latent
    return DenoisedPair(VideoLatent(uncond), VideoLatent(cond_est))


class GaussianDenoiser:
    def __init__(self, world: GaussianWorldSpec):
        self.world = world

    def __call__(
        self, x_t: VideoLatent, sigma: float, cond: FrameCondition | None
    ) -> DenoisedPair:
        return gaussian_denoise(x_t, sigma, cond, self.world)


# ---------------------------------------------------------------------------
# shift world


def _axes(world: MotionWorldSpec) -> tuple[np.ndarray, np.ndarray]:
    h, w = world.grid
    return np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)


def render_frame(world: MotionWorldSpec, p: np.ndarray) -> np.ndarray:
    """Unit-height Gaussian blob centered at p = (x, y); shape (H, W)."""
    rows, cols = _axes(world)
    inv2 = 1.0 / (2.0 * world.blob_sigma**2)
    gy = np.exp(-((rows - p[1]) ** 2) * inv2)
    gx = np.exp(-((cols - p[0]) ** 2) * inv2)
    return np.outer(gy, gx)


def render_track(world: MotionWorldSpec, p1: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Frames of a blob starting at p1 and moving v per frame; (N, H, W)."""
    steps = np.arange(world.n_frames, dtype=np.float64)
    positions = np.asarray(p1, dtype=np.float64)[None, :] + steps[:, None] * np.asarray(
        v, dtype=np.float64
    )
    return _render_positions(world, positions)


def _render_positions(world: MotionWorldSpec, positions: np.ndarray) -> np.ndarray:
    """Render one frame per row of ``positions`` (..., 2) -> (..., H, W)."""
    rows, cols = _axes(world)
    inv2 = 1.0 / (2.0 * world.blob_sigma**2)
    gy = np.exp(-((positions[..., 1:2] - rows[None, :]) ** 2) * inv2)
    gx = np.exp(-((positions[..., 0:1] - cols[None, :]) ** 2) * inv2)
    return gy[..., :, None] * gx[..., None, :]


def decode_blob_position(frame: np.ndarray, world: MotionWorldSpec) -> np.ndarray:
    """Intensity-weighted centroid of a frame, as (x, y) pixels.

    Negative intensities are ignored; a frame with no positive mass has no
    decodable position and raises DegenerateConditionError.
    """
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single-channel frame, got {arr.shape}")
        arr = arr[0]
    if arr.shape != world.grid:
        raise ValueError(f"frame shape {arr.shape} does not match grid {world.grid}")
    weights = np.clip(arr, 0.0, None)
    total = weights.sum()
    if total <= 1e-12:
        raise DegenerateConditionError("frame has no positive mass to locate a blob")
    rows, cols = _axes(world)
    py = float((weights.sum(axis=1) * rows).sum() / total)
    px = float((weights.sum(axis=0) * cols).sum() / total)
    return np.array([px, py])


@dataclass
class TrackFit:
    """Result of a penalized single-blob trajectory fit."""

    p1: np.ndarray
    v: np.ndarray
    rms: float
    objective: float
    rendered: np.ndarray  # (N, H, W)


@lru_cache(maxsize=8)
def _world_tables(world: MotionWorldSpec):
    """Static search tables for one world: the integer velocity grid and the
    spectra used by the position initializer (align-and-sum via the FFT shift
    theorem, then correlation with the blob kernel)."""
    h, w = world.grid
    n = world.n_frames
    vr = np.arange(-_V_RADIUS, _V_RADIUS + 1, dtype=np.float64)
    vx, vy = np.meshgrid(vr, vr, indexing="ij")
    vgrid = np.stack([vx.ravel(), vy.ravel()], axis=1)  # (V, 2)

    fy = np.fft.fftfreq(h)[:, None]  # cycles per pixel, rows
    fx = np.fft.rfftfreq(w)[None, :]  # cols
    steps = np.arange(n, dtype=np.float64)
    # Shifting frame i by -i*v multiplies its spectrum by exp(+2j pi i (fy vy + fx vx)).
    phase = np.exp(
        2j
        * np.pi
        * (
            steps[None, :, None, None] * vgrid[:, None, 1:2, None] * fy[None, None]
            + steps[None, :, None, None] * vgrid[:, None, 0:1, None] * fx[None, None]
        )
    )  # (V, N, H, W//2+1)

    # Circular blob kernel spectrum for the correlation score.
    rows = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
    cols = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
    inv2 = 1.0 / (2.0 * world.blob_sigma**2)
    kernel = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) * inv2)
    khat = np.fft.rfft2(kernel)
    return vgrid, phase, khat


def _track_gaussians(
    world: MotionWorldSpec, p1: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame separable factors gy (.., H) and gx (.., W) for a track.

    Leading axes of p1/v broadcast; returns (gy, gx, positions)."""
    rows, cols = _axes(world)
    steps = np.arange(world.n_frames, dtype=np.float64)
    pos = p1[..., None, :] + steps[:, None] * v[..., None, :]  # (..., N, 2)
    inv2 = 1.0 / (2.0 * world.blob_sigma**2)
    gy = np.exp(-((pos[..., 1:2] - rows) ** 2) * inv2)  # (..., N, H)
    gx = np.exp(-((pos[..., 0:1] - cols) ** 2) * inv2)  # (..., N, W)
    return gy, gx, pos


def _data_term(frames: np.ndarray, gy: np.ndarray, gx: np.ndarray, x_sq: float) -> np.ndarray:
    """sum_i ||frames_i - outer(gy_i, gx_i)||^2 without forming the renders.

    frames is (N, H, W); gy/gx carry leading batch axes. Uses
    ||x - r||^2 = ||x||^2 - 2 <x, r> + ||r||^2 with separable inner products.
    """
    t = np.einsum("nhw,...nh->...nw", frames, gy)
    cross = np.einsum("...nw,...nw->...", t, gx)
    r_sq = np.einsum("...nh,...nw->...", gy * gy, gx * gx)
    return x_sq - 2.0 * cross + r_sq


def _penalty(world: MotionWorldSpec, v: np.ndarray, sigma: float) -> np.ndarray:
    bias = np.asarray(world.bias_velocity)
    dv = v - bias
    return world.bias_strength * sigma * sigma * np.sum(dv * dv, axis=-1)


def _objective(
    world: MotionWorldSpec,
    frames: np.ndarray,
    x_sq: float,
    p1: np.ndarray,
    v: np.ndarray,
    sigma: float,
) -> float:
    gy, gx, _ = _track_gaussians(world, p1, v)
    return float(_data_term(frames, gy, gx, x_sq) + _penalty(world, v, sigma))


def _newton_refine(
    world: MotionWorldSpec,
    frames: np.ndarray,
    x_sq: float,
    p1: np.ndarray,
    v: np.ndarray,
    sigma: float,
    pin_p1: bool,
    iterations: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton polish of the integer-grid winner.

    Steps that fail to decrease the penalized objective are rejected and the
    refinement stops, so the result never regresses below the grid answer.
    """
    rows, cols = _axes(world)
    steps = np.arange(world.n_frames, dtype=np.float64)
    inv2 = 1.0 / (2.0 * world.blob_sigma**2)
    beta = world.bias_strength
    bias = np.asarray(world.bias_velocity)
    best = _objective(world, frames, x_sq, p1, v, sigma)
    for _ in range(iterations):
        gy, gx, pos = _track_gaussians(world, p1, v)  # (N, H), (N, W)
        render = gy[:, :, None] * gx[:, None, :]
        res = frames - render
        # d render / d px = outer(gy, gx') with gx' = gx * (cols - px) / blob_sigma^2
        dgx = gx * (cols[None, :] - pos[:, 0:1]) * 2.0 * inv2
        dgy = gy * (rows[None, :] - pos[:, 1:2]) * 2.0 * inv2
        d_px = gy[:, :, None] * dgx[:, None, :]
        d_py = dgy[:, :, None] * gx[:, None, :]
        if pin_p1:
            jac = np.stack(
                [steps[:, None, None] * d_px, steps[:, None, None] * d_py]
            )  # (2, N, H, W)
        else:
            jac = np.stack(
                [d_px, d_py, steps[:, None, None] * d_px, steps[:, None, None] * d_py]
            )
        grad = -2.0 * np.einsum("pnhw,nhw->p", jac, res)
        hess = 2.0 * np.einsum("pnhw,qnhw->pq", jac, jac)
        # Penalty is exactly quadratic in v.
        if pin_p1:
            grad += 2.0 * beta * sigma * sigma * (v - bias)
            hess[np.diag_indices(2)] += 2.0 * beta * sigma * sigma
        else:
            grad[2:] += 2.0 * beta * sigma * sigma * (v - bias)
            hess[2, 2] += 2.0 * beta * sigma * sigma
            hess[3, 3] += 2.0 * beta * sigma * sigma
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.isfinite(step).all():
            break
        if pin_p1:
            cand_p1, cand_v = p1, v - step
        else:
            cand_p1, cand_v = p1 - step[:2], v - step[2:]
        cand_obj = _objective(world, frames, x_sq, cand_p1, cand_v, sigma)
        if not np.isfinite(cand_obj) or cand_obj >= best:
            break
        p1, v, best = cand_p1, cand_v, cand_obj
    return p1, v


def fit_blob_track(
    frames: np.ndarray,
    sigma: float,
    world: MotionWorldSpec,
    p1: np.ndarray | None = None,
) -> TrackFit:
    """Fit a single constant-velocity blob track to (N, H, W) frames.

    Minimizes sum_i ||frames_i - render(p1 + i*v)||^2
    + bias_strength * sigma^2 * ||v - bias_velocity||^2 over an integer
    velocity grid (|v| <= 4 px/frame per axis), then polishes with two
    Gauss-Newton steps. Passing ``p1`` pins the track origin (used by
    conditioned denoising); otherwise the origin per candidate velocity is
    initialized at the peak of the blob-correlated align-and-sum map.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    n, h, w = frames.shape
    if (h, w) != world.grid or n != world.n_frames:
        raise ValueError(
            f"frames {frames.shape} do not match world grid {world.grid} x {world.n_frames}"
        )
    vgrid, phase, khat = _world_tables(world)
    x_sq = float(np.sum(frames * frames))

    if p1 is not None:
        p1_cands = np.broadcast_to(np.asarray(p1, dtype=np.float64), (len(vgrid), 2))
    else:
        spectra = np.fft.rfft2(frames)  # (N, H, W//2+1)
        aligned = np.einsum("nhk,vnhk->vhk", spectra, phase)
        score_maps = np.fft.irfft2(aligned * khat[None], s=(h, w))  # (V, H, W)
        flat = score_maps.reshape(len(vgrid), -1).argmax(axis=1)
        rows_idx, cols_idx = np.unravel_index(flat, (h, w))
        p1_cands = np.stack([cols_idx, rows_idx], axis=1).astype(np.float64)

    gy, gx, _ = _track_gaussians(world, p1_cands, vgrid)
    objectives = _data_term(frames, gy, gx, x_sq) + _penalty(world, vgrid, sigma)
    best = int(np.argmin(objectives))
    p1_best, v_best = p1_cands[best].copy(), vgrid[best].copy()

    p1_fit, v_fit = _newton_refine(
        world, frames, x_sq, p1_best, v_best, sigma, pin_p1=p1 is not None
    )
    rendered = render_track(world, p1_fit, v_fit)
    resid = frames - rendered
    rms = float(np.sqrt(np.mean(resid * resid)))
    return TrackFit(
        p1=p1_fit,
        v=v_fit,
        rms=rms,
        objective=_objective(world, frames, x_sq, p1_fit, v_fit, sigma),
        rendered=rendered,
    )


def _shrink_toward(
    frames: np.ndarray, rendered: np.ndarray, sigma: float, rms: float, ceiling: float
) -> np.ndarray:
    """Blend observation and fitted rendering with the Gaussian posterior form.

    The effective prior scale is the fit residual in excess of the expected
    noise at this level, floored so the blend stays defined for exact fits
    and capped twice: at the largest residual world-expressible content can
    leave, and at sigma itself, since residual structure no bigger than the
    scheduled noise cannot be told apart from it. Without the caps an input
    far off the track manifold would be passed through untouched and the
    sampler's contraction toward clean videos would stall.
    """
    excess = max(rms * rms - sigma * sigma, RESIDUAL_FLOOR * RESIDUAL_FLOOR)
    sd2 = min(excess, ceiling * ceiling, sigma * sigma)
    w = sd2 / (sd2 + sigma * sigma)
    return w * frames + (1.0 - w) * rendered


class ShiftWorldDenoiser:
    """Penalized trajectory-fit denoiser for the single-blob shift world.

    The unconditional branch fits (p1, v) freely; a condition (either role)
    pins p1 to the blob position decoded from the condition latent. Both
    branches return the input shrunk toward their fitted rendering.
    """

    def __init__(self, world: MotionWorldSpec):
        self.world = world
        h, w = world.grid
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        blob = render_frame(world, center)
        self._residual_ceiling = _CEILING_GAIN * float(np.sqrt(np.mean(blob * blob)))

    def __call__(
        self, x_t: VideoLatent, sigma: float, cond: FrameCondition | None
    ) -> DenoisedPair:
        if sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        n, c, h, w = x_t.data.shape
        if c != 1:
            raise ValueError(f"shift world expects single-channel latents, got C={c}")
        if (h, w) != self.world.grid or n != self.world.n_frames:
            raise ValueError(
                f"latent {x_t.data.shape} does not match world {self.world.grid} x {self.world.n_frames}"
            )
        frames = x_t.data[:, 0]
        cap = self._residual_ceiling
        fit_u = fit_blob_track(frames, sigma, self.world, p1=None)
        uncond = _shrink_toward(frames, fit_u.rendered, sigma, fit_u.rms, cap)
        if cond is None:
            cond_est = uncond
        else:
            p0 = decode_blob_position(cond.latent, self.world)
            fit_c = fit_blob_track(frames, sigma, self.world, p1=p0)
            cond_est = _shrink_toward(frames, fit_c.rendered, sigma, fit_c.rms, cap)
        return DenoisedPair(VideoLatent(uncond[:, None]), VideoLatent(cond_est[:, None]))


class CallAuditor:
    """Wraps a denoiser and records (sigma, condition role) per call."""

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.calls: list[tuple[float, str | None]] = []

    def __call__(
        self, x_t: VideoLatent, sigma: float, cond: FrameCondition | None
    ) -> DenoisedPair:
        self.calls.append((float(sigma), None if cond is None else cond.role))
        return self.inner(x_t, sigma, cond)

    @property
    def total(self) -> int:
        return len(self.calls)

    def count_role(self, role: str | None) -> int:
        return sum(1 for _, r in self.calls if r == role)

    def reset(self) -> None:
        self.calls.clear()
