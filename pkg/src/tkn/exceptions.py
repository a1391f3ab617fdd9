"""Exception types raised by the library."""


class ShapeError(ValueError):
    """Array shapes do not compose."""


class RoiError(ValueError):
    """A region of interest is out of bounds or smaller than its kernel."""


class NumericalError(ArithmeticError):
    """A NaN or infinite value appeared in a result."""


class DataFormatError(ValueError):
    """A data file is malformed (bad magic number, truncated payload, ...)."""


class ConfigError(ValueError):
    """Invalid training/CLI configuration."""


class CheckpointError(ValueError):
    """A checkpoint file cannot be decoded."""
