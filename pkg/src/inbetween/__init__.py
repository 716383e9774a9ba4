"""Desk-scale laboratory for time-reversal video inbetweening samplers."""

from .errors import (
    BackendUnavailableError,
    ConfigError,
    DegenerateConditionError,
    SnapshotMissingError,
)
from .latents import (
    NoiseSchedule,
    ResidualStack,
    RngStream,
    VideoLatent,
    build_schedule,
    frame_residual,
    lerp,
    load_latent,
    save_latent,
    temporal_flip,
)
from .stepper import (
    DenoisedPair,
    GuidanceSpec,
    apply_cfg,
    eps_and_score,
    euler_step,
    euler_step_uncond_anchor,
    renoise,
)

__version__ = "0.1.0"

__all__ = [
    "BackendUnavailableError",
    "ConfigError",
    "DegenerateConditionError",
    "SnapshotMissingError",
    "NoiseSchedule",
    "ResidualStack",
    "RngStream",
    "VideoLatent",
    "build_schedule",
    "frame_residual",
    "lerp",
    "load_latent",
    "save_latent",
    "temporal_flip",
    "DenoisedPair",
    "GuidanceSpec",
    "apply_cfg",
    "eps_and_score",
    "euler_step",
    "euler_step_uncond_anchor",
    "renoise",
    "__version__",
]
