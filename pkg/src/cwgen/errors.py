"""Shared exception types.

Every module raises these instead of bare ValueError/RuntimeError so callers
can distinguish contract violations (bad arguments) from numerical failures
discovered mid-computation.
"""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, symmetry, range)."""


class NumericError(ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class SingularMatrixError(NumericError):
    """A matrix that must be invertible is (numerically) singular."""


class DataError(ValueError):
    """Malformed or degenerate input data (CSV parsing, zero-variance channels)."""


class TrainingDiverged(RuntimeError):
    """Training produced non-finite losses or gradients."""


class PrerequisiteError(RuntimeError):
    """A pipeline stage is missing an artifact a previous stage must produce."""
