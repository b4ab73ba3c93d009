"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class NoTemplateError(RuntimeError):
    """Raised when every initial prediction is empty, so no shape template exists."""


class FormatError(ValueError):
    """A persisted file failed to parse. ``field`` names the offending header field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class CorruptionError(ValueError):
    pass
