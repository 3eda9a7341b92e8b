"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SharpDepthError(Exception):
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), **self.details}


class ConfigError(SharpDepthError, ValueError):
    """Invalid parameters, thresholds, or configuration files."""

    exit_code = 2


class DataError(SharpDepthError, ValueError):
    """Input data that cannot be processed (bad files, invalid values)."""

    exit_code = 3


class ShapeError(DataError):
    def __init__(self, message, expected=None, got=None):
        super().__init__(message, expected=expected, got=got)
        self.expected = expected
        self.got = got


class NumericError(SharpDepthError, ArithmeticError):
    """Non-finite values encountered during optimization."""

    exit_code = 4
