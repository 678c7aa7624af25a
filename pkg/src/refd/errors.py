"""Exception hierarchy shared across the package."""


class RefdError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(RefdError):
    """A file does not follow the expected container format."""


class CorruptionError(FormatError):
    """A container header is valid but the payload does not match it."""


class DegenerateRowError(RefdError, ValueError):
    """A feature row (or direction vector) has effectively zero norm, so
    cosine geometry is undefined for it."""


class ConfigError(RefdError, ValueError):
    """A configuration value violates its contract."""


class DataError(RefdError, ValueError):
    """Input data violates a precondition (bad labels, missing classes)."""


class NumericalError(RefdError, ArithmeticError):
    """A numerical operation could not be completed (non-finite values,
    singular covariance)."""
