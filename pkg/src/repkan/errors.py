"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; library users can catch the
common base class.
"""


class RepKanError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RepKanError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigurationError(RepKanError):
    """A configuration value is invalid or infeasible."""


class InputError(RepKanError):
    """An input value (label, index, argument) is out of range."""


class DataFormatError(RepKanError):
    """A serialized file is malformed, truncated, or version-incompatible."""


class StateError(RepKanError):
    """Operation invoked on an object in the wrong mode or lifecycle state."""


class NumericError(RepKanError):
    """Training or evaluation produced non-finite values."""
