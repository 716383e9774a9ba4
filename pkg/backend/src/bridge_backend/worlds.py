"""Reference analytic denoisers evaluated by the backend.

Two toy worlds, mirroring the sampler laboratory's reference formulas:

- Gaussian world: frames drawn from N(mu, sigma_d^2 I); denoising is the
  closed-form posterior-mean blend, with a condition pinning the first
  frame's prior mean.
- Shift world: one Gaussian blob on a constant-velocity track; denoising
  fits (origin, velocity) by penalized least squares over an integer
  velocity grid with Gauss-Newton polish, then shrinks the input toward
  the fitted rendering. The velocity penalty beta * sigma^2 * ||v - bias||^2
  expresses a directional prior that fades as sigma drops.

Both run in float64; the wire truncates to float32 in transit.
"""
from __future__ import annotations

import json
import math

import numpy as np

__all__ = ["GaussianWorld", "ShiftWorld", "load_world"]

# Effective prior scale never drops below this, keeping blends defined
# when the fit explains the input exactly.
RESIDUAL_FLOOR = 1e-3

# The largest residual clean world content can leave against a candidate
# track is a complete blob miss (true blob plus spurious render, disjoint):
# sqrt(2) times one blob's per-pixel RMS. Anything above is noise.
CEILING_GAIN = math.sqrt(2.0)

# Integer velocity search radius, pixels per frame, per axis.
V_RADIUS = 4


class GaussianWorld:
    """Frame-wise Gaussian prior with mean frame mu and scale sigma_d."""

    def __init__(self, mu: np.ndarray, sigma_d: float):
        mu = np.asarray(mu, dtype=np.float64)
        if mu.ndim != 3:
            raise ValueError(f"mu must be a single (C, H, W) frame, got {mu.shape}")
        if sigma_d <= 0.0:
            raise ValueError(f"sigma_d must be positive, got {sigma_d}")
        self.mu = mu
        self.sigma_d = float(sigma_d)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def denoise(
        self, data: np.ndarray, sigma: float, cond: np.ndarray | None, role: str
    ) -> tuple[np.ndarray, np.ndarray]:
        if data.shape[1:] != self.mu.shape:
            raise ValueError(f"frame shape {data.shape[1:]} does not match mu {self.mu.shape}")
        sd2 = self.sigma_d**2
        s2 = sigma * sigma
        w = sd2 / (sd2 + s2)
        uncond = w * data + (1.0 - w) * self.mu
        if cond is None:
            return uncond, uncond
        if cond.shape != self.mu.shape:
            raise ValueError(f"condition shape {cond.shape} does not match mu {self.mu.shape}")
        cond_est = uncond.copy()
        cond_est[0] = w * data[0] + (1.0 - w) * cond
        return uncond, cond_est


class ShiftWorld:
    """Single-blob constant-velocity world on an H x W grid."""

    def __init__(
        self,
        grid: tuple[int, int],
        blob_sigma: float,
        n_frames: int,
        bias_velocity: tuple[float, float],
        bias_strength: float,
    ):
        h, w = int(grid[0]), int(grid[1])
        if h < 8 or w < 8:
            raise ValueError(f"grid must be at least 8x8, got {grid}")
        if blob_sigma <= 0.0:
            raise ValueError(f"blob_sigma must be positive, got {blob_sigma}")
        if n_frames < 2:
            raise ValueError(f"need at least 2 frames, got {n_frames}")
        if bias_strength < 0.0:
            raise ValueError(f"bias_strength must be >= 0, got {bias_strength}")
        self.grid = (h, w)
        self.blob_sigma = float(blob_sigma)
        self.n_frames = int(n_frames)
        self.bias_velocity = np.array(
            [float(bias_velocity[0]), float(bias_velocity[1])], dtype=np.float64
        )
        self.bias_strength = float(bias_strength)
        self._rows = np.arange(h, dtype=np.float64)
        self._cols = np.arange(w, dtype=np.float64)
        self._steps = np.arange(self.n_frames, dtype=np.float64)
        self._inv2 = 1.0 / (2.0 * self.blob_sigma**2)
        self._vgrid, self._phase, self._khat = self._search_tables()
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        blob = self.render_frame(center)
        self._residual_ceiling = CEILING_GAIN * float(np.sqrt(np.mean(blob * blob)))

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return (1, *self.grid)

    def _search_tables(self):
        """Integer velocity grid plus the spectra used by the position
        initializer: align-and-sum via the FFT shift theorem, then
        correlation with the blob kernel."""
        h, w = self.grid
        vr = np.arange(-V_RADIUS, V_RADIUS + 1, dtype=np.float64)
        vx, vy = np.meshgrid(vr, vr, indexing="ij")
        vgrid = np.stack([vx.ravel(), vy.ravel()], axis=1)  # (V, 2)
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.rfftfreq(w)[None, :]
        steps = self._steps
        phase = np.exp(
            2j
            * np.pi
            * (
                steps[None, :, None, None] * vgrid[:, None, 1:2, None] * fy[None, None]
                + steps[None, :, None, None] * vgrid[:, None, 0:1, None] * fx[None, None]
            )
        )  # (V, N, H, W//2+1)
        rows = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
        cols = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
        kernel = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) * self._inv2)
        khat = np.fft.rfft2(kernel)
        return vgrid, phase, khat

    # -- rendering ---------------------------------------------------------

    def render_frame(self, p: np.ndarray) -> np.ndarray:
        gy = np.exp(-((self._rows - p[1]) ** 2) * self._inv2)
        gx = np.exp(-((self._cols - p[0]) ** 2) * self._inv2)
        return np.outer(gy, gx)

    def render_track(self, p1: np.ndarray, v: np.ndarray) -> np.ndarray:
        gy, gx, _ = self._track_factors(
            np.asarray(p1, dtype=np.float64), np.asarray(v, dtype=np.float64)
        )
        return gy[..., :, None] * gx[..., None, :]

    def _track_factors(self, p1: np.ndarray, v: np.ndarray):
        """Separable per-frame blob factors; leading axes of p1/v broadcast."""
        pos = p1[..., None, :] + self._steps[:, None] * v[..., None, :]
        gy = np.exp(-((pos[..., 1:2] - self._rows) ** 2) * self._inv2)
        gx = np.exp(-((pos[..., 0:1] - self._cols) ** 2) * self._inv2)
        return gy, gx, pos

    def decode_position(self, frame: np.ndarray) -> np.ndarray:
        """Intensity-weighted centroid (x, y) over positive mass."""
        arr = np.asarray(frame, dtype=np.float64)
        if arr.ndim == 3:
            if arr.shape[0] != 1:
                raise ValueError(f"expected a single-channel frame, got {arr.shape}")
            arr = arr[0]
        if arr.shape != self.grid:
            raise ValueError(f"frame shape {arr.shape} does not match grid {self.grid}")
        weights = np.clip(arr, 0.0, None)
        total = weights.sum()
        if total <= 1e-12:
            raise ValueError("condition frame has no positive mass to locate a blob")
        py = float((weights.sum(axis=1) * self._rows).sum() / total)
        px = float((weights.sum(axis=0) * self._cols).sum() / total)
        return np.array([px, py])

    # -- trajectory fit ----------------------------------------------------

    def _data_term(self, frames, gy, gx, x_sq):
        # ||x - r||^2 expanded with separable inner products; no renders built.
        t = np.einsum("nhw,...nh->...nw", frames, gy)
        cross = np.einsum("...nw,...nw->...", t, gx)
        r_sq = np.einsum("...nh,...nw->...", gy * gy, gx * gx)
        return x_sq - 2.0 * cross + r_sq

    def _penalty(self, v: np.ndarray, sigma: float):
        dv = v - self.bias_velocity
        return self.bias_strength * sigma * sigma * np.sum(dv * dv, axis=-1)

    def _objective(self, frames, x_sq, p1, v, sigma) -> float:
        gy, gx, _ = self._track_factors(p1, v)
        return float(self._data_term(frames, gy, gx, x_sq) + self._penalty(v, sigma))

    def _refine(self, frames, x_sq, p1, v, sigma, pin_p1, iterations=2):
        """Gauss-Newton polish; steps that fail to decrease the penalized
        objective are rejected, so the grid answer never regresses."""
        beta = self.bias_strength
        bias = self.bias_velocity
        steps = self._steps
        best = self._objective(frames, x_sq, p1, v, sigma)
        for _ in range(iterations):
            gy, gx, pos = self._track_factors(p1, v)
            render = gy[:, :, None] * gx[:, None, :]
            res = frames - render
            dgx = gx * (self._cols[None, :] - pos[:, 0:1]) * 2.0 * self._inv2
            dgy = gy * (self._rows[None, :] - pos[:, 1:2]) * 2.0 * self._inv2
            d_px = gy[:, :, None] * dgx[:, None, :]
            d_py = dgy[:, :, None] * gx[:, None, :]
            if pin_p1:
                jac = np.stack([steps[:, None, None] * d_px, steps[:, None, None] * d_py])
            else:
                jac = np.stack(
                    [d_px, d_py, steps[:, None, None] * d_px, steps[:, None, None] * d_py]
                )
            grad = -2.0 * np.einsum("pnhw,nhw->p", jac, res)
            hess = 2.0 * np.einsum("pnhw,qnhw->pq", jac, jac)
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
            cand_obj = self._objective(frames, x_sq, cand_p1, cand_v, sigma)
            if not np.isfinite(cand_obj) or cand_obj >= best:
                break
            p1, v, best = cand_p1, cand_v, cand_obj
        return p1, v

    def fit_track(self, frames: np.ndarray, sigma: float, p1: np.ndarray | None = None):
        """Best (p1, v, rendered, rms) for the penalized least-squares fit.

        Free fits initialize each candidate velocity's origin at the peak
        of the blob-correlated align-and-sum map; a supplied p1 pins the
        origin (conditioned denoising).
        """
        frames = np.ascontiguousarray(frames, dtype=np.float64)
        n, h, w = frames.shape
        if (h, w) != self.grid or n != self.n_frames:
            raise ValueError(
                f"frames {frames.shape} do not match world grid {self.grid} x {self.n_frames}"
            )
        x_sq = float(np.sum(frames * frames))
        vgrid = self._vgrid
        if p1 is not None:
            p1_cands = np.broadcast_to(np.asarray(p1, dtype=np.float64), (len(vgrid), 2))
        else:
            spectra = np.fft.rfft2(frames)
            aligned = np.einsum("nhk,vnhk->vhk", spectra, self._phase)
            score_maps = np.fft.irfft2(aligned * self._khat[None], s=(h, w))
            flat = score_maps.reshape(len(vgrid), -1).argmax(axis=1)
            rows_idx, cols_idx = np.unravel_index(flat, (h, w))
            p1_cands = np.stack([cols_idx, rows_idx], axis=1).astype(np.float64)
        gy, gx, _ = self._track_factors(p1_cands, vgrid)
        objectives = self._data_term(frames, gy, gx, x_sq) + self._penalty(vgrid, sigma)
        best = int(np.argmin(objectives))
        p1_fit, v_fit = self._refine(
            frames, x_sq, p1_cands[best].copy(), vgrid[best].copy(), sigma, pin_p1=p1 is not None
        )
        rendered = self.render_track(p1_fit, v_fit)
        resid = frames - rendered
        rms = float(np.sqrt(np.mean(resid * resid)))
        return p1_fit, v_fit, rendered, rms

    def _shrink(self, frames, rendered, sigma, rms):
        """Posterior-form blend of input and fitted rendering. The prior
        scale is the above-noise residual, floored for exact fits and
        capped at the largest world-expressible residual and at sigma."""
        excess = max(rms * rms - sigma * sigma, RESIDUAL_FLOOR * RESIDUAL_FLOOR)
        cap = self._residual_ceiling
        sd2 = min(excess, cap * cap, sigma * sigma)
        w = sd2 / (sd2 + sigma * sigma)
        return w * frames + (1.0 - w) * rendered

    def denoise(
        self, data: np.ndarray, sigma: float, cond: np.ndarray | None, role: str
    ) -> tuple[np.ndarray, np.ndarray]:
        n, c, h, w = data.shape
        if c != 1:
            raise ValueError(f"shift world expects single-channel latents, got C={c}")
        if (h, w) != self.grid or n != self.n_frames:
            raise ValueError(
                f"latent {data.shape} does not match world {self.grid} x {self.n_frames}"
            )
        frames = data[:, 0]
        _, _, rendered_u, rms_u = self.fit_track(frames, sigma, p1=None)
        uncond = self._shrink(frames, rendered_u, sigma, rms_u)
        if cond is None:
            cond_est = uncond
        else:
            p0 = self.decode_position(cond)
            _, _, rendered_c, rms_c = self.fit_track(frames, sigma, p1=p0)
            cond_est = self._shrink(frames, rendered_c, sigma, rms_c)
        return uncond[:, None], cond_est[:, None]


def load_world(source) -> GaussianWorld | ShiftWorld:
    """Build a world from a JSON file path or an already-parsed mapping.

    Gaussian worlds take mu as a nested list or a scalar fill (with shape);
    shift worlds take the grid/blob/bias fields.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    else:
        spec = source
    if not isinstance(spec, dict):
        raise ValueError(f"world spec must be a mapping, got {type(spec).__name__}")
    kind = spec.get("kind")
    if kind == "gaussian":
        mu = spec.get("mu", 0.0)
        if isinstance(mu, (int, float)):
            shape = spec.get("shape")
            if not isinstance(shape, list) or len(shape) != 3:
                raise ValueError("scalar mu needs a 3-element shape [C, H, W]")
            mu = np.full(tuple(int(d) for d in shape), float(mu))
        return GaussianWorld(mu=np.asarray(mu, dtype=np.float64), sigma_d=spec["sigma_d"])
    if kind == "motion":
        return ShiftWorld(
            grid=tuple(spec["grid"]),
            blob_sigma=spec["blob_sigma"],
            n_frames=spec["n_frames"],
            bias_velocity=tuple(spec.get("bias_velocity", (0.0, 0.0))),
            bias_strength=spec.get("bias_strength", 0.0),
        )
    raise ValueError(f"world kind must be 'gaussian' or 'motion', got {kind!r}")
