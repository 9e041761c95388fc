"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, scheme or experiment configuration."""


class NumericalError(RuntimeError):
    """A numerical step failed (non-finite state, singular covariance, ...)."""
