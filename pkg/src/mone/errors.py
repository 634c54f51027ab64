"""Exception hierarchy shared by the library and the CLI."""


class MoneError(Exception):
    exit_code = 1


class ConfigError(MoneError, ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InputError(MoneError, ValueError):
    exit_code = 2


class NumericInputError(InputError):
    pass


class ShapeError(MoneError, ValueError):
    exit_code = 2


class CompatibilityError(MoneError):
    exit_code = 3


class ComparisonError(MoneError, ValueError):
    exit_code = 2


class FormatError(MoneError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OutputError(MoneError, OSError):
    exit_code = 4
