"""Exception hierarchy shared by every module.

CLI exit codes map onto these: ConfigError -> 2, NumericalError -> 3,
FormatError -> 4.
"""


class LSTCError(Exception):
    pass


class DimensionError(LSTCError, ValueError):
    pass


class StateError(LSTCError, RuntimeError):
    pass


class ConfigError(LSTCError, ValueError):
    pass


class NumericalError(LSTCError, ArithmeticError):
    pass


class FormatError(LSTCError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
