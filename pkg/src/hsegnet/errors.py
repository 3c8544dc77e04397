"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class HSegNetError(Exception):
    pass


class DimensionError(HSegNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class CorruptionError(HSegNetError, ValueError):
    """A pooling index map or serialized blob is malformed."""


class ConfigError(HSegNetError, ValueError):
    pass


class DataError(HSegNetError):
    pass


class NumericalError(HSegNetError, ArithmeticError):
    """NaN/Inf encountered, failed gradient check, or non-deterministic function."""


class TapeError(HSegNetError, RuntimeError):
    """Backward called on a non-scalar or on an already consumed graph."""
