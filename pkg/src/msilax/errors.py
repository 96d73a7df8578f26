"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (see ``msilax.cli``).
"""


class MsiLaxError(Exception):
    """Base class for all package errors."""


class DimensionError(MsiLaxError, ValueError):
    """Incompatible tensor shapes."""


class ConfigError(MsiLaxError, ValueError):
    """Invalid configuration value or parameter combination."""


class SpecError(ConfigError):
    """A dataset spec that cannot be realised (e.g. digit does not fit)."""


class DataError(MsiLaxError, ValueError):
    """Bad data content: labels out of range, count mismatches, bad indices."""


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(MsiLaxError, RuntimeError):
    """API used out of contract (non-scalar backward, unfrozen model, ...)."""


class TrainingError(MsiLaxError, RuntimeError):
    """Optimisation diverged."""
