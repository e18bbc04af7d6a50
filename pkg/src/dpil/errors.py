"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values.

    ``index`` locates the failure (batch row, epoch, reverse step, iteration)
    and ``where`` names what that index counts.
    """

    def __init__(self, message, index=None, where=None):
        super().__init__(message)
        self.index = index
        self.where = where


class DemoParseError(ValueError):
    """A demonstration file could not be parsed; ``record`` is the 0-based line."""

    def __init__(self, message, record=None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record
