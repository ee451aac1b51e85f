"""Exception types shared across the package."""


class XmodalError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(XmodalError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(XmodalError):
    """Input lies outside the mathematical domain of the operation."""


class DegenerateInputError(XmodalError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class ContractError(XmodalError):
    """A documented precondition of an operation was violated."""


class DatasetFormatError(XmodalError):
    """Dataset file is malformed or internally inconsistent."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CheckpointError(XmodalError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class TrainingDivergedError(XmodalError):
    """Training produced a non-finite loss value."""
