"""Exception types shared across the library."""


class EstimationError(Exception):
    """Base class for every failure this package raises on purpose."""


class InvalidSpecError(EstimationError, ValueError):
    """A spectrum specification violates its constraints."""


class InvalidInputError(EstimationError, ValueError):
    """An array argument has an unusable shape, size, or scale."""


class RankDeficientError(EstimationError):
    """A factorization input was numerically rank deficient.

    ``index`` is the offending column when the failure came from a QR
    factorization, else ``None``.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class SingularFactorError(EstimationError):
    """A triangular factor cannot be inverted."""


class DegeneratePairError(EstimationError):
    """A two-column orthonormalization received (near-)parallel columns."""


class DegenerateResidualError(EstimationError):
    """The held-out test vector lies numerically inside the deflation basis."""


class BasisSaturationError(EstimationError):
    """The deflation basis would fill the whole space."""
