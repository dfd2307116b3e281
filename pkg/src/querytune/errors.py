"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition (shape, range, missing token)."""


class NumericalFailure(ArithmeticError):
    """A computation produced non-finite values or diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyMaskError(RuntimeError):
    """A localization mask selected no locations, so matching cannot proceed."""


class EmptyMatchError(RuntimeError):
    """A match set carries no pairs, so a correspondence loss is undefined."""


class CheckpointError(RuntimeError):
    """A checkpoint archive is missing, truncated, or inconsistent with its manifest."""
