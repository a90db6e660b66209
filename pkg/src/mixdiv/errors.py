"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Tensor shapes incompatible for the requested operation."""


class ContractViolation(ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(RuntimeError):
    """Non-finite values appeared where finite math is required."""


class CorpusAlignmentError(ValueError):
    """Parallel corpus files disagree on line counts."""


class FileFormatError(ValueError):
    """An artifact file does not parse; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
