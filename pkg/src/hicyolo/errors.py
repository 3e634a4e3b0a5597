"""Exception types shared across the package."""


class HicError(Exception):
    """Base class for all package errors."""


class ShapeError(HicError, ValueError):
    """An operand has an incompatible shape; the message names the offending dimension."""


class NumericError(HicError, ArithmeticError):
    """Non-finite values (NaN/Inf) where finite ones are required."""


class DataError(HicError):
    """Malformed or missing input data (annotation files, images, datasets)."""


class FormatError(DataError):
    """A binary container (tensor file or checkpoint) failed validation."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConfigHashError(FormatError):
    """Checkpoint was written for a different model configuration."""


class ConfigError(HicError, ValueError):
    """Invalid model or run configuration."""
