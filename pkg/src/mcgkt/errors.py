"""Exception hierarchy shared by every subsystem.

Each error carries the name of the subsystem that raised it so the command
line front end can report ``module=<name>`` without guessing.
"""


class MCGKTError(Exception):
    module = "mcgkt"
    exit_code = 1


class ShapeError(MCGKTError, ValueError):
    module = "tensor"


class UsageError(MCGKTError):
    module = "cli"


class ConfigError(MCGKTError, ValueError):
    module = "config"


class FormatError(MCGKTError):
    module = "archive"
    exit_code = 2


class MappingError(MCGKTError, KeyError):
    module = "ekt"

    def __str__(self):
        # KeyError would otherwise repr() the message
        return Exception.__str__(self)


class DataIOError(MCGKTError, OSError):
    module = "rain_data"
    exit_code = 2


class NumericError(MCGKTError, ArithmeticError):
    module = "trainer"
    exit_code = 3
