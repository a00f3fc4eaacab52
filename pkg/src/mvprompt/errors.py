"""Exception types shared across the package.

The CLI maps ValidationError to exit code 1 and every other failure to
exit code 2.
"""


class ValidationError(ValueError):
    """An input violates a documented contract (shape, range, mode, ...)."""


class LoadError(RuntimeError):
    """A file could not be read or does not match its expected manifest."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; the offending batch was dumped."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
