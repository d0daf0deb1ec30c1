"""Exception taxonomy shared across the package.

The CLI maps these onto its documented exit codes: 0 ok, 2 usage,
3 data, 4 numeric failure.
"""


class VideoLayersError(Exception):
    exit_code = 1


class UsageError(VideoLayersError):
    """Bad flags, bad arguments, malformed configuration."""

    exit_code = 2


class ConfigError(UsageError):
    """Configuration file violates the documented schema."""


class DataError(VideoLayersError):
    """Missing or malformed input data (files, directories, fields)."""

    exit_code = 3


class BadMagicError(DataError):
    """Binary container does not start with the expected magic bytes."""


class UnsupportedVersionError(DataError):
    """Binary container carries a format version we cannot read."""


class TruncatedFileError(DataError):
    """Binary container ends before its declared payload."""


class ChecksumError(DataError):
    """Binary container payload fails its checksum."""


class ShapeMismatchError(DataError):
    """Stored array shapes disagree with the declared configuration."""


class DomainError(VideoLayersError):
    """A numeric argument violated its domain contract (caller bug)."""

    exit_code = 4


class NumericError(VideoLayersError):
    """Non-finite values or divergence during optimization."""

    exit_code = 4
