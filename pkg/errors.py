"""Exception hierarchy shared by every module."""


class GlapError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(GlapError, ValueError):
    pass


class ShapeError(InvalidInputError):
    pass


class NumericError(GlapError, ArithmeticError):
    """Non-finite value met during a computation; `index` locates it."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(GlapError):
    pass


class ManifestError(ConfigError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TensorFileError(GlapError):
    pass


class ChecksumError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class MissingFileError(TensorFileError):
    pass


class DtypeError(TensorFileError):
    pass


class RangeError(TensorFileError, IndexError):
    pass


class VersionError(GlapError):
    pass


class EncoderError(GlapError):
    """Encoder failure for one record; wraps the underlying error."""

    def __init__(self, record_id, cause):
        super().__init__(f"record {record_id!r}: {cause}")
        self.record_id = record_id
        self.cause = cause
