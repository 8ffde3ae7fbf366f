"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see ``blockrepair.cli``).
"""


class RepairError(Exception):
    """Base class for all library errors."""


class ConfigError(RepairError, ValueError):
    """Invalid configuration value or combination of values."""


class InputError(RepairError, ValueError):
    """Invalid input data (empty dataset, label out of range, ...)."""


class DimensionError(InputError):
    """Tensor shape mismatch. ``axis`` names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class UsageError(RepairError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar root."""


class NumericFailure(RepairError, ArithmeticError):
    """A NaN or Inf showed up in a loss or gradient."""


class UnsupportedError(RepairError, ValueError):
    """Requested feature is outside what this package implements."""


class FormatError(RepairError, ValueError):
    """Malformed file on disk."""


class ModelLoadError(FormatError):
    """Base class for ``.armdl`` load failures."""


class VersionError(ModelLoadError):
    def __init__(self, found, expected):
        super().__init__(f"unsupported model format version {found} (this build reads version {expected})")
        self.found = found
        self.expected = expected


class ChecksumError(ModelLoadError):
    pass


class TruncatedError(ModelLoadError):
    pass


class DegenerateArchitecture(RepairError, RuntimeError):
    """Discretization left the output node unreachable."""
