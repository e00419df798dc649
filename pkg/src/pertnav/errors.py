"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class PertnavError(Exception):
    pass


class ConfigError(PertnavError):
    """Bad run configuration (unknown keys, invalid ranges, missing paths)."""


class DataError(PertnavError):
    """Malformed or inconsistent input data."""


class NumericError(PertnavError):
    """Non-finite or otherwise unusable numeric state."""
