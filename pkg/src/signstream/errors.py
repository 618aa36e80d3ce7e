"""Exception types shared across the package."""


class SignStreamError(Exception):
    pass


class FormatError(SignStreamError):
    """Bad magic, unknown version or malformed field in a binary file."""


class LengthError(SignStreamError):
    """Binary payload is truncated or carries trailing bytes."""


class SchemaError(SignStreamError, ValueError):
    """Shapes or dimensions disagree with what was declared."""


class DegeneratePoseError(SignStreamError, ValueError):
    pass


class InsufficientDataError(SignStreamError, ValueError):
    pass


class PreconditionError(SignStreamError, ValueError):
    pass


class NoTargetError(SignStreamError, ValueError):
    """A loss was requested over zero masked cells."""


class ConfigError(SignStreamError, ValueError):
    """Invalid configuration; ``fields`` holds one message per offending field."""

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields) if fields else [str(message)]


class DataError(SignStreamError, ValueError):
    pass


class TrainingDiverged(SignStreamError, RuntimeError):
    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
