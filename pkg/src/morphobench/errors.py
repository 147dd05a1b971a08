"""Exception hierarchy shared by all harness stages.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class HarnessError(Exception):
    """Base class for every error raised deliberately by the harness."""


class DataError(HarnessError, ValueError):
    """Malformed, missing or inconsistent input data."""


class ConfigError(HarnessError, ValueError):
    """Invalid configuration values."""


class NumericalError(HarnessError, ArithmeticError):
    """Non-finite values or degenerate geometry in a numerical routine."""


class InapplicableDistance(NumericalError):
    """A distance kind cannot be evaluated on the given data (e.g. Bray-Curtis on negative data)."""
