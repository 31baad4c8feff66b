"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: usage and configuration
problems exit 1, data and file-format problems exit 2, numeric
failures exit 3.
"""


class ShapeError(ValueError):
    """An operation received arrays whose shapes do not fit together."""


class GraphError(ValueError):
    """An autodiff contract was violated (e.g. backward on a non-scalar)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class FormatError(ValueError):
    """A serialized file does not follow its binary layout."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic string."""


class TruncatedFileError(FormatError):
    """The file ends before the payload its header promises."""


class HeaderMismatchError(FormatError):
    """The header disagrees with the payload actually present."""


class UndefinedMetricError(ValueError):
    """A metric was requested on input where it has no defined value."""


class UsageError(ValueError):
    """Bad command-line invocation."""
