"""Error types shared across the package.

Plain ``ValueError`` is used for ordinary invalid-input failures; the classes
here exist where callers need to branch on the failure kind.
"""


class DegenerateConditionError(ValueError):
    """A condition latent carries no usable signal (e.g. an all-zero frame)."""


class BackendUnavailableError(RuntimeError):
    """The external denoiser backend cannot be reached or broke mid-stream."""


class SnapshotMissingError(LookupError):
    """A trace was asked for step estimates it never recorded."""


class ConfigError(ValueError):
    """An experiment config file is missing, malformed, or inconsistent."""
