"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class AsyncovError(Exception):
    exit_code = 1


class ConfigError(AsyncovError, ValueError):
    """Invalid configuration or command-line usage."""

    exit_code = 2


class DataError(AsyncovError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericalError(AsyncovError, ArithmeticError):
    """A numerical routine could not produce a usable result."""

    exit_code = 4
