"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid layer/grid/spec configuration (e.g. groups not dividing channels)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """The gradient tape does not contain a node that backward needs."""


class NumericError(ArithmeticError):
    """An iterative numeric routine failed to converge, or produced NaN."""


class DataError(ValueError):
    """Bad labels or malformed input data."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the network spec."""
