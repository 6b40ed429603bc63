"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or axes that do not line up for an operation."""


class ConfigError(ValueError):
    """Invalid configuration value or precondition."""


class DataFormatError(IOError):
    """Malformed or unreadable on-disk artifact (dataset, checkpoint, run dir)."""
