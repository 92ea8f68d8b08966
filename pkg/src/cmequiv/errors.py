"""Exception types shared across the package."""


class CMError(Exception):
    """Base class for all errors raised by cmequiv."""


class NonSymmetric(CMError):
    pass


class NotSPD(CMError):
    pass


class Singular(CMError):
    pass


class InvalidParams(CMError):
    pass


class SingularT(CMError):
    pass


class IncompatibleShape(CMError):
    pass


class FactorizationFailure(CMError):
    """An intermediate covariance block in an extraction recursion is not SPD."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NotReciprocal(CMError):
    pass


class UnsupportedPair(CMError):
    pass


class DimensionMismatch(CMError):
    pass


class Infeasible(CMError):
    """The recursion of a shared-law Markov construction hit a non-SPD block at time ``k``."""

    def __init__(self, k: int, message: str | None = None):
        super().__init__(message or f"recursion infeasible at k={k}")
        self.k = k


class NotEquivalent(CMError):
    """Two models are not probabilistically (or algebraically) equivalent within tolerance."""
