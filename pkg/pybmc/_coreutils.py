import logging


logger = logging.getLogger("pybmc")


class BmcError(Exception):
    """Base error for the KV-cache allocation library."""


class CapacityExceededError(BmcError):
    """The context would grow beyond the maximum context length N."""


class DivisibilityError(BmcError, ValueError):
    """A closed form was asked for a chunk size that does not divide N."""


class BoundsError(BmcError, IndexError):
    """A row count lies outside the allocated buffer."""


class DimensionError(BmcError, ValueError):
    """Tensor shapes (or model dimensions) do not fit together."""


class PlacementError(BmcError):
    """Speculative rows cannot be staged in the padded region."""


class ConsistencyError(BmcError):
    """An acceptance result does not match the staged speculation tree."""


class CalibrationError(BmcError):
    """A microbenchmark produced an unusable measurement."""


class NumericError(BmcError):
    """The decode loop produced non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
