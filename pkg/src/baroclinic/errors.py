"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when grids, truncations or run settings are inconsistent."""


class ValidationFailure(RuntimeError):
    """Raised when a numerical self-check falls outside its accepted band."""
