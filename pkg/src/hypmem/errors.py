"""Exception hierarchy shared by all hypmem modules."""


class HypmemError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HypmemError, ValueError):
    """Dimension or curvature mismatch between operands."""


class NumericError(HypmemError, ArithmeticError):
    """Non-finite values or numerically impossible intermediate results."""


class DomainError(HypmemError, ValueError):
    """Argument outside the documented domain of an operation."""


class DegenerateGeometryError(DomainError):
    """Angle undefined: coincident points or a base point at the apex."""


class NotTangentError(DomainError):
    """Vector is not in the tangent space of its base point."""


class MissingItemError(HypmemError, KeyError):
    """Lookup of an entry, node or embedding that does not exist."""


class TrainingDivergedError(HypmemError):
    """Loss or gradients became non-finite during optimisation."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class StoreError(HypmemError):
    """Base class for persistence failures."""


class CorruptFileError(StoreError):
    """Magic, structure or content hash of a stored file does not check out."""


class StoreValidationError(StoreError):
    """File decoded but its payload violates a model invariant."""


class BankMismatchError(StoreError):
    """Snapshot references a bank with a different content hash."""
