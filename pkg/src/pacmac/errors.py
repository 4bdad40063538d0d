"""Exception types shared across the package."""


class PacmacError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(PacmacError):
    pass


class InvalidAttributeError(PacmacError):
    pass


class NotScalarError(PacmacError):
    pass


class UntrackedRootError(PacmacError):
    pass


class NonFiniteError(PacmacError):
    pass


class InvalidConfigError(PacmacError):
    pass


class InvalidMaskConfigError(PacmacError):
    pass


class LengthMismatchError(PacmacError):
    pass


class CommitteeSizeMismatchError(PacmacError):
    pass


class OracleWithoutLabelError(PacmacError):
    pass


class OutOfRangeError(PacmacError):
    pass


class EmptyDatasetError(PacmacError):
    pass


class InvalidSpecError(PacmacError):
    pass


class CorruptManifestError(PacmacError):
    pass


class MagicMismatchError(PacmacError):
    pass


class TruncatedPayloadError(PacmacError):
    pass


class DimensionMismatchError(PacmacError):
    pass


class ZeroVarianceError(PacmacError):
    pass


class InsufficientDataError(PacmacError):
    pass


class EmptyInputError(PacmacError):
    pass


class UnknownKeyError(PacmacError):
    pass
