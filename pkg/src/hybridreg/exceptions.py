"""Exception hierarchy shared by all registration stages."""


class HybridRegError(Exception):
    """Base class for errors raised by this package."""


class FormatError(HybridRegError, ValueError):
    """Input file exists but its content cannot be parsed."""


class MatchValidationError(HybridRegError, ValueError):
    """A match record violates the MatchSet invariants."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class DegenerateConfigurationError(HybridRegError, ValueError):
    """Point configuration or matrix is rank deficient."""


class InsufficientDataError(HybridRegError, ValueError):
    """Not enough correspondences for the requested estimate."""


class RansacFailure(HybridRegError, RuntimeError):
    """RANSAC found no model supported by enough inliers."""


class DivergenceError(HybridRegError, FloatingPointError):
    """An objective term produced a non-finite value or gradient."""

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite value in loss term '{term}'")
