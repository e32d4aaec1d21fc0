"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``NumericalError`` to
exit code 3.
"""


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range value, inconsistent config."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or diverged."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContainerError(ValidationError):
    """Corrupt or truncated array container file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
