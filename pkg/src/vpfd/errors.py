class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class DependencyError(RuntimeError):
    """A required upstream artifact (checkpoint, corpus) is missing (CLI exit code 3)."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = str(path) if path is not None else None
        self.step = step


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss (CLI exit code 4)."""
