"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class ShapeMismatchError(ValidationError):
    """Structural mismatch between parameter containers."""


class NumericAbort(RuntimeError):
    """Non-finite loss or gradient encountered (CLI exit code 3).

    Carries enough context to locate the offending step.
    """

    def __init__(self, message, step=None, model=None):
        super().__init__(message)
        self.step = step
        self.model = model
