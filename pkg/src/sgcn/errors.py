"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A setting, architecture or model description is invalid."""


class FormatError(ValueError):
    """A file on disk does not follow its binary or text layout."""


class DataError(ValueError):
    """Input data is inconsistent (bad labels, misaligned ids, empty clips)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""
