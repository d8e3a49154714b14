"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented bounds or schema."""


class TimestepError(ValueError):
    """A diffusion timestep lies outside [1, T]."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
