"""Exception hierarchy shared by every subsystem."""


class PromptSegError(Exception):
    """Base class for all package errors."""


class ValidationError(PromptSegError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class FormatError(PromptSegError):
    """A file could not be parsed under the requested format."""


class FormatUnavailableError(FormatError):
    """The requested format needs an optional dependency that is not installed."""


class SpecError(ValidationError):
    """A scene description cannot be realized (e.g. objects do not fit)."""


class StateError(PromptSegError, RuntimeError):
    pass


class IncompatibleCheckpointError(FormatError):
    pass


class ConfigError(PromptSegError):
    pass


class NumericError(PromptSegError, FloatingPointError):
    """A non-finite value appeared during training or inference."""

    def __init__(self, role: str, message: str | None = None):
        self.role = role
        super().__init__(message or f"non-finite values in {role}")
