from typing import Optional


class CddrError(Exception):
    """Root of every error raised by the toolkit."""


class IndexOutOfRangeError(CddrError, IndexError):
    "Raised when a fragment or trajectory entry falls outside its stage range."


class InvalidWideningError(CddrError, ValueError):
    "Raised when asked to widen to a memory depth below the current one."


class ShapeMismatchError(CddrError, ValueError):
    "Raised when coefficient tables, trajectories or matrices disagree in shape."


class SpecValidationError(CddrError, ValueError):
    "Raised when a problem document fails validation."


class AssemblyError(CddrError):
    "Raised when the LP cannot be assembled from the given data."


class ObjectiveError(CddrError):
    "Raised when an objective kind is used on a path that does not support it."


class RankError(CddrError, ValueError):
    "Raised when polytope vertices do not affinely span their ambient space."


class SizeGuardError(CddrError):
    "Raised when a brute-force enumeration exceeds its configured size guard."


class SolverError(CddrError):
    "Raised when a solver cannot be resolved or returns an unusable answer."


class MpsFormatError(CddrError, ValueError):
    "Raised on malformed MPS text or name collisions."


class InfeasibleProblemError(CddrError):
    """Raised when the CDDR LP has no solution.

    Carries the first stage whose constraints cannot be met and, when a single
    row is responsible, that row's 1-based index.
    """

    def __init__(self, message: str, stage: Optional[int] = None, row: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.row = row
