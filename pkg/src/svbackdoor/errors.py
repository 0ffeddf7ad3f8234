"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input is well-formed but the requested quantity is undefined (e.g. a zero mean)."""


class FormatError(ValueError):
    """A file on disk is malformed or was tampered with."""


class UnsupportedFormatError(FormatError):
    """A file is well-formed but uses a layout this package does not read."""


class SynthesisFailure(RuntimeError):
    """Trigger optimization ran out of budget before reaching the minimum similarity."""

    def __init__(self, message: str, similarity: float):
        super().__init__(message)
        self.similarity = similarity


class StageDependencyError(FileNotFoundError):
    """A pipeline stage was invoked before the artifact it consumes exists."""
