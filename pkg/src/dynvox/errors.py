"""Exception types shared across the package."""


class DynvoxError(Exception):
    pass


class InvalidInputError(DynvoxError, ValueError):
    pass


class OutOfBoundsError(InvalidInputError):
    pass


class EmptyGradientError(DynvoxError, RuntimeError):
    pass


class ConfigError(DynvoxError, ValueError):
    pass


class NumericalError(DynvoxError, FloatingPointError):
    def __init__(self, message, group=None, dump_path=None):
        super().__init__(message)
        self.group = group
        self.dump_path = dump_path


class CheckpointError(DynvoxError, ValueError):
    pass


class DatasetError(DynvoxError, ValueError):
    """Malformed dataset on disk; ``frame`` names the offending frame when known."""

    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"{frame}: {message}")
        self.frame = frame


class SpecError(DynvoxError, ValueError):
    pass
