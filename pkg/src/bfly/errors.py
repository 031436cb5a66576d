"""Exception types shared across the package."""


class BflyError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(BflyError):
    """Operand shapes are incompatible."""


class NotPowerOfTwo(BflyError):
    """A butterfly width must be an integral power of two."""


class InvalidLayer(BflyError):
    """Layer index outside [0, depth)."""


class InvalidRank(BflyError):
    """Requested rank outside the valid range."""


class NotSquare(BflyError):
    """Operation requires a square matrix."""


class NotSymmetric(BflyError):
    """Matrix is not symmetric within tolerance."""


class IterationLimitExceeded(BflyError):
    """A factorization failed to converge."""


class NotUnitVector(BflyError):
    """Input vector must have unit Euclidean norm."""


class InvalidDims(BflyError):
    """Invalid dimension parameters for a sampler."""


class StaleCache(BflyError):
    """backward() called with a cache from a different forward()."""


class NonFiniteLoss(BflyError):
    """Training produced a NaN or Inf loss."""


class RankDeficientSketch(BflyError):
    """The sketched Gram matrix B X Xt Bt is numerically rank deficient."""


class NotAtCriticalPoint(BflyError):
    """Gradient precondition for critical-point verification violated."""


class DegenerateSpectrum(BflyError):
    """Eigenvalue or singular-value gaps too small for a stable result."""


class InvalidIndexSet(BflyError):
    """Eigenvalue index set out of range or with duplicates."""


class EmptyTestSet(BflyError):
    """A matrix set argument must be nonempty."""


class MalformedFile(BflyError):
    """A serialized matrix or network file could not be parsed."""


class ZeroMatrix(BflyError):
    """Operation undefined for an all-zero matrix."""
