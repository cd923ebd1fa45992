"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class InternalInvariantError(RuntimeError):
    """An internal consistency check failed; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
