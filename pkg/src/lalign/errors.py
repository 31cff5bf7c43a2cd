"""Exception types raised across the package.

Everything derives from :class:`LalignError` so callers (notably the CLI)
can catch the whole family at once. Data-shaped problems also subclass
``ValueError``; filesystem problems subclass ``OSError``.
"""


class LalignError(Exception):
    """Base class for all package errors."""


class DataError(LalignError, ValueError):
    """Input data is malformed or inconsistent."""


class NonSquareError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class DimMismatchError(DataError):
    pass


class ConvergenceError(LalignError, ArithmeticError):
    pass


class ZeroColumnError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class ManifestMismatchError(DataError):
    pass


class InvalidSpecError(DataError):
    pass


class SingletonClassError(DataError):
    pass


class TargetTooLargeError(DataError):
    pass


class NoPositiveError(DataError):
    pass


class MissingLabelsError(DataError):
    pass


class EmptyGalleryError(DataError):
    pass


class TooLargeError(DataError):
    pass


class MisalignedError(DataError):
    pass


class FormatVersionError(DataError):
    pass


class MissingFileError(LalignError, FileNotFoundError):
    pass


class IoFailure(LalignError, OSError):
    pass


class DegenerateInputWarning(UserWarning):
    """Cross-covariance is rank deficient; some directions were resolved arbitrarily."""
