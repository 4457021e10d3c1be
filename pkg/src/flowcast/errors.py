"""Exception types shared across the package.

The CLI maps each class to a one-word error category so callers can
grep a failed run's stderr.
"""


class FlowcastError(Exception):
    """Base class for all package-specific errors."""

    category = "error"


class FormatError(FlowcastError):
    """On-disk artifact malformed: bad manifest, truncated blob, bad tag."""

    category = "format"


class ShapeError(FlowcastError):
    """Array arguments do not have the shapes the operation requires."""

    category = "shape"


class ConfigError(FlowcastError):
    """Invalid or contradictory configuration values."""

    category = "config"


class DataError(FlowcastError):
    """Input data violates a documented invariant (ordering, emptiness)."""

    category = "data"


class IntegrationDivergedError(FlowcastError):
    """Non-finite values appeared during ODE integration."""

    category = "divergence"


class TrainingDivergedError(FlowcastError):
    """Training loss became non-finite."""

    category = "divergence"
