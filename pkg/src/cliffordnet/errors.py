"""Exception types shared across the package."""


class CliffordNetError(Exception):
    """Base class for all package errors."""


class DimensionError(CliffordNetError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(CliffordNetError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CliffordNetError, ValueError):
    """Malformed dataset files or out-of-range labels."""


class UsageError(CliffordNetError, RuntimeError):
    """API misuse, e.g. backward() on a non-scalar."""


class CheckpointError(CliffordNetError, ValueError):
    """Checkpoint file rejected: bad magic, version, or parameter layout."""
