"""Exception types raised across the package."""


class BellcalError(Exception):
    """Base class for all package errors."""


class OverlapViolation(BellcalError):
    """Target policy puts mass on an action the behavior policy never takes."""


class SolverFailure(BellcalError):
    """A linear system that should be nonsingular was not."""


class SingularSystem(SolverFailure):
    pass


class DimensionMismatch(BellcalError, ValueError):
    pass


class LengthMismatch(BellcalError, ValueError):
    pass


class NonpositiveWeight(BellcalError, ValueError):
    pass


class NegativeWeight(BellcalError, ValueError):
    pass


class NonfiniteTarget(BellcalError):
    """A Bellman target came out NaN or infinite (usually an unclipped nuisance)."""


class TruncationTooLoose(BellcalError, ValueError):
    pass


class StationaryNotFound(BellcalError):
    pass


class FoldError(BellcalError):
    """A fitting routine received data from the wrong side of the sample split."""


class InvalidDataset(BellcalError, ValueError):
    pass
