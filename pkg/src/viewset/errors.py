class InputError(ValueError):
    """Caller supplied data that does not satisfy an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class StateError(RuntimeError):
    """An object was used before it reached the required state."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the model."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
