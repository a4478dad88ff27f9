class SensorSelectionError(Exception):
    """Base class for all errors raised by the sensor selection library."""


class DimensionMismatchError(SensorSelectionError, ValueError):
    """Shapes of a pair, a basis or a selection do not agree."""


class InvalidMatrixError(SensorSelectionError, ValueError):
    """Input matrix or index set violates a structural requirement.

    Raised for non-symmetric or non positive definite covariances,
    bases with non-orthonormal columns and malformed sensor index sets.
    """


class IllConditionedError(SensorSelectionError):
    """Numerically singular matrix met where an inverse or a root is needed."""


class ObjectiveError(SensorSelectionError):
    """Objective returned a non-finite value on a boundary sample."""


class QCQPConvergenceError(SensorSelectionError):
    """Alternating projections did not close the duality gap within the cap."""

    def __init__(self, iterations: int, gap: float) -> None:
        self.iterations = iterations
        self.gap = gap
        super().__init__(
            f"QCQP did not converge after {iterations} iterations (gap {gap:.3e})"
        )


class OracleCapExceededError(SensorSelectionError):
    """Exhaustive enumeration would exceed the configured number of subsets."""

    def __init__(self, n: int, p: int, count: int, cap: int) -> None:
        self.n = n
        self.p = p
        self.count = count
        self.cap = cap
        super().__init__(
            f"C({n}, {p}) = {count} subsets exceeds the oracle cap {cap}"
        )


class UncertaintyNotSupportedError(SensorSelectionError):
    """Mean-difference solvers were called on an instance with finite k."""
