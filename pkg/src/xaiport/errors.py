"""Exception types shared across the package."""


class XaiportError(Exception):
    """Base class for framework errors."""


class ShapeError(XaiportError, ValueError):
    pass


class XtenFormatError(XaiportError, ValueError):
    pass


class ModelSpecError(XaiportError, ValueError):
    pass


class BackendError(XaiportError):
    """A scoring call failed."""


class BackendTimeout(BackendError):
    pass


class ProtocolError(BackendError):
    """The scoring service answered with something outside the wire schema."""


class ConfigError(XaiportError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


class MissingRunError(XaiportError, KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing report cells: " + ", ".join("/".join(c) for c in self.missing))

    def __str__(self) -> str:
        return self.args[0]


class StageError(XaiportError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
