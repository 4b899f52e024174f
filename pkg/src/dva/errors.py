"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class DvaError(Exception):
    exit_code = 1


class ShapeError(DvaError, ValueError):
    exit_code = 2


class ConfigError(DvaError, ValueError):
    exit_code = 2


class InputError(DvaError, ValueError):
    exit_code = 2


class IntegrityError(DvaError):
    """Corrupt or mismatched weight / data file."""

    exit_code = 3


class NumericalError(DvaError, ArithmeticError):
    exit_code = 4
