"""Exception hierarchy shared across the package.

Every intentional failure raises a subclass of :class:`MmpuzzleError` so the
CLI can map it to a stable exit code; anything else escaping is a bug.
"""


class MmpuzzleError(Exception):
    """Base class for all errors this package raises on purpose."""


class DataError(MmpuzzleError):
    """Invalid input data (bad volume, incompatible puzzle spec, ...)."""


class DimensionError(DataError):
    """Shapes or extents that do not fit an operation's contract."""


class ConfigError(MmpuzzleError):
    """Bad configuration file: unknown key, wrong type, invalid value."""


class FormatError(DataError):
    """Malformed binary file. ``code`` distinguishes the failure class."""

    code = "format"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedFileError(FormatError):
    code = "truncated"


class HeaderRangeError(FormatError):
    """Header fields out of range (zero/overflowing dims, bad lengths)."""

    code = "header_range"


class CorruptDataError(FormatError):
    """Payload inconsistent with the header (non-finite values, bad labels)."""

    code = "corrupt_data"


class NumericError(MmpuzzleError):
    """Non-finite values where finite ones are required."""


class TrainingDivergedError(NumericError):
    """Training aborted on a non-finite loss; carries diagnostics."""

    def __init__(self, message, epoch=None, batch=None, loss_trace=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.loss_trace = list(loss_trace or [])
