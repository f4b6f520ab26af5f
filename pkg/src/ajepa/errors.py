"""Exception types shared across the package."""


class AjepaError(Exception):
    """Base class for all package errors."""


class DecodeError(AjepaError):
    """Malformed or unreadable audio container."""


class UnsupportedFormatError(AjepaError):
    """Audio container is valid but uses an unsupported codec or layout."""


class EmptyInputError(AjepaError):
    """Input signal is empty or shorter than one analysis window."""


class ShapeError(AjepaError):
    """Array shapes are inconsistent with the configured geometry."""


class ConfigError(AjepaError):
    """Configuration values violate an invariant."""


class SamplingError(AjepaError):
    """A single mask could not be placed within the retry budget."""


class UnsatisfiableMaskError(SamplingError):
    """A whole mask plan failed repeatedly; the config is likely infeasible."""


class DegenerateMaskError(AjepaError):
    """An attention call would leave some query with no surviving key."""


class MetricError(AjepaError):
    """A metric has no evaluable class or item."""


class CheckpointError(AjepaError):
    """Checkpoint file is malformed or incompatible with the model config."""


class UsageError(AjepaError):
    """Bad command line invocation."""
