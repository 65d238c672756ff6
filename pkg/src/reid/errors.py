"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each class."""


class ReidError(Exception):
    exit_code = 1


class ConfigError(ReidError, ValueError):
    exit_code = 2


class FormatError(ReidError, IOError):
    """Base class for on-disk format problems."""

    exit_code = 3
    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class TruncatedFileError(FormatError):
    code = "truncated"


class NumericError(ReidError, ArithmeticError):
    exit_code = 4


class VerificationError(NumericError):
    """A verification harness (gradient check) did not pass."""
