"""Exception types shared across the package."""


class CactusNetError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(CactusNetError, ValueError):
    """Two array shapes that must conform do not."""


class UnsupportedArchitectureError(CactusNetError, ValueError):
    """The network does not have the structure an operation requires."""


class NumericFailureError(CactusNetError, ArithmeticError):
    """A NaN or Inf appeared where finite values are guaranteed."""

    def __init__(self, message, layer_index=None, job=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.job = job


class CheckpointError(CactusNetError, ValueError):
    """A checkpoint file is corrupt, truncated, or of the wrong format.

    ``found_magic`` / ``expected_magic`` are set when the 8-byte
    magic did not match.
    """

    def __init__(self, message, found_magic=None, expected_magic=None):
        super().__init__(message)
        self.found_magic = found_magic
        self.expected_magic = expected_magic


class DataError(CactusNetError, ValueError):
    """A data file or data request is malformed."""


class ManifestError(CactusNetError, ValueError):
    """A dataset manifest violates one of its invariants."""


class AggregationError(CactusNetError, ValueError):
    """Separability records cannot be aggregated as requested."""


class LeakageError(CactusNetError, ValueError):
    """Evaluation data overlaps training data."""


class ConfigError(CactusNetError, ValueError):
    """An experiment configuration is invalid or incomplete."""


class RoutingError(CactusNetError, ValueError):
    """A routing step received inconsistent candidates or an unusable tree."""
