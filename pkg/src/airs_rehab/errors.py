from __future__ import annotations

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_TRANSPORT = 5


class AirsError(Exception):
    """Base class for every error raised by the airs_rehab package."""

    exit_code = 1


# ----------------------------------------------------------------------
# Input validation (exit 3)
# ----------------------------------------------------------------------


class ValidationError(AirsError, ValueError):
    exit_code = EXIT_VALIDATION


class MalformedRecord(ValidationError):
    pass


class UnknownJointSet(ValidationError):
    pass


class NonMonotonicTimestamps(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class EmptyCloud(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class DegenerateFootprint(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class ResolutionMismatch(ValidationError):
    pass


class UnknownJoint(ValidationError):
    pass


class ZeroLengthRay(ValidationError):
    pass


class TripleMismatch(ValidationError):
    pass


class BandTooNarrow(ValidationError):
    pass


class MissingInput(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class InvalidCounts(ValidationError):
    pass


class UnparseableVerdict(ValidationError):
    def __init__(self, raw: str) -> None:
        super().__init__(f"Judge response has no YES/NO token: {raw[:120]!r}")
        self.raw = raw


class ConfigError(ValidationError):
    pass


# ----------------------------------------------------------------------
# Numerical failures (exit 3)
# ----------------------------------------------------------------------


class ComputationError(AirsError, RuntimeError):
    exit_code = EXIT_VALIDATION


class NoConvergence(ComputationError):
    pass


class ImpossibleGeometry(ComputationError):
    pass


# ----------------------------------------------------------------------
# No feasible answer (exit 4)
# ----------------------------------------------------------------------


class InfeasibleError(AirsError):
    exit_code = EXIT_INFEASIBLE


class NoPlacement(InfeasibleError):
    pass


class NoPath(InfeasibleError):
    pass


class StartOccupied(InfeasibleError):
    pass


class GoalOccupied(InfeasibleError):
    pass


# ----------------------------------------------------------------------
# Chat transport (exit 5)
# ----------------------------------------------------------------------


class TransportError(AirsError):
    exit_code = EXIT_TRANSPORT


class ReplayMiss(TransportError):
    def __init__(self, content_hash: str) -> None:
        super().__init__(f"No replay response stored for bundle hash {content_hash}")
        self.content_hash = content_hash


class RateLimited(TransportError):
    pass
