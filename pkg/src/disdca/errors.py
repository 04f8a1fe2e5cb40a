"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class DisdcaError(Exception):
    exit_code = 1


class ConfigError(DisdcaError, ValueError):
    exit_code = 2


class DataError(DisdcaError):
    """Malformed input files or unreadable paths."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TransportError(DisdcaError):
    exit_code = 4


class ProtocolError(TransportError):
    pass


class NumericalError(DisdcaError, ArithmeticError):
    exit_code = 5


class DomainError(NumericalError, ValueError):
    """Argument outside the domain of a convex conjugate."""


class NotConvergedError(NumericalError):
    pass


class UnsupportedModeError(ConfigError):
    pass


class BoundViolation(DisdcaError):
    exit_code = 6
