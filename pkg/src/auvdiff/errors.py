"""Exception hierarchy shared by every module."""


class AuvDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(AuvDiffError, ValueError):
    """Invalid configuration value, unknown key or violated precondition on a setting."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(AuvDiffError, ValueError):
    pass


class UsageError(AuvDiffError, RuntimeError):
    """API called in the wrong order or on an invalid object (empty buffer, stale cache, ...)."""


class TrainingError(AuvDiffError, RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


class LoadError(AuvDiffError, RuntimeError):
    """Checkpoint or record file is unreadable or incompatible with the current configuration."""
