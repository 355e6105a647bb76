"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class ParseError(ValueError):
    """Raised by the text loaders on malformed input.

    The offending 1-based line number is kept in ``lineno``.
    """

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ScheduleError(ValueError):
    """Raised when a step size falls outside the range a solver accepts."""


class ConfigError(ValueError):
    """Raised for invalid experiment configuration files."""
