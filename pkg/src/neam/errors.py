"""Exception types shared across the package."""


class NeamError(Exception):
    """Base class for all package-specific errors."""


class OutOfRange(NeamError):
    """A parameter or angle is outside its documented domain."""


class DimensionMismatch(NeamError):
    """An array argument has the wrong length or shape."""


class NonFinite(NeamError):
    """A computation produced NaN or Inf where finiteness is guaranteed."""


class RefusedTooLarge(NeamError):
    """An exhaustive operation was requested on a problem too big to enumerate."""


class BadMagic(NeamError):
    """A binary file does not start with the expected magic bytes."""


class BadHeader(NeamError):
    """A binary file header carries unsupported dimensions or fields."""


class VersionUnsupported(NeamError):
    """A binary file declares a format version this build cannot read."""


class Truncated(NeamError):
    """A binary file ends before its declared payload."""


class ChecksumMismatch(NeamError):
    """Stored checksum does not match the payload (corruption or altered inputs)."""
