"""Exception types shared across the package."""


class AdvsalError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AdvsalError):
    """Invalid configuration: bad shapes, unknown ids, mismatched artifacts."""


class DataError(AdvsalError):
    """Invalid data: out-of-range labels, malformed files, bad value ranges."""


class UsageError(AdvsalError):
    """API misuse, e.g. backpropagating from a non-scalar node."""


class CheckpointError(AdvsalError):
    """Corrupt or incompatible checkpoint / dataset file."""


class NumericError(AdvsalError):
    """A NaN or Inf escaped a numerical operation."""
