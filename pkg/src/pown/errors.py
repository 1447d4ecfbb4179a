"""Exception types shared across the library."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ContractViolation(ValueError):
    """A documented precondition was violated by the caller."""


class DatasetFormatError(ValueError):
    """An on-disk dataset file is malformed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CapabilityError(RuntimeError):
    """The requested computation exceeds a documented size limit."""
