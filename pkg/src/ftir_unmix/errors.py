"""Exception types raised across the package.

The CLI maps these onto exit codes: :class:`DataError` subclasses give 3,
:class:`NumericalError` gives 4.
"""


class UnmixError(Exception):
    """Base class for every error raised by ftir_unmix."""


class DataError(UnmixError, ValueError):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """A file does not follow the expected binary or text layout."""


class LengthError(DataError):
    """A file payload is shorter or longer than its header announces."""


class DimensionError(DataError):
    """Array shapes do not agree."""


class ConfigError(DataError):
    """A configuration value violates its documented range."""


class GenerationError(UnmixError):
    """Synthetic scene generation could not satisfy its constraints."""


class InitError(UnmixError):
    """Model parameters could not be initialised from the given cube."""


class NumericalError(UnmixError, ArithmeticError):
    """A loss or gradient became non-finite."""
