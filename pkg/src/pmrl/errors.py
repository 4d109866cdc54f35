"""Exception types raised across the package."""


class PmrlError(Exception):
    """Base class for all package errors."""


class ZeroColumn(PmrlError, ValueError):
    pass


class DimensionMismatch(PmrlError, ValueError):
    pass


class NotSymmetric(PmrlError, ValueError):
    pass


class NotConverged(PmrlError, RuntimeError):
    pass


class NonFinite(PmrlError, FloatingPointError):
    pass


class EmptyBatch(PmrlError, ValueError):
    pass


class BatchTooSmall(PmrlError, ValueError):
    pass


class NonUnitColumns(PmrlError, ValueError):
    pass


class LengthMismatch(PmrlError, ValueError):
    pass


class BadAnchor(PmrlError, ValueError):
    pass


class StaleCache(PmrlError, ValueError):
    pass


class ShapeMismatch(PmrlError, ValueError):
    pass


class BadConfig(PmrlError, ValueError):
    pass


class ConfigInvalid(PmrlError, ValueError):
    pass


class SingleClass(PmrlError, ValueError):
    pass


class UnknownSuite(PmrlError, ValueError):
    pass


class IoFailure(PmrlError, OSError):
    pass


class CheckpointFormatError(PmrlError, ValueError):
    pass
