"""Exception hierarchy mapped to CLI exit codes."""


class VqApcError(Exception):
    exit_code = 1


class ConfigError(VqApcError):
    """Bad configuration or usage (exit 2)."""

    exit_code = 2


class DataError(VqApcError):
    """Malformed or missing input data (exit 3)."""

    exit_code = 3


class NumericsError(VqApcError):
    """Numerical failure such as non-finite values (exit 4)."""

    exit_code = 4
