"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class SlideSearchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SlideSearchError):
    """Invalid configuration: bad key, missing path, out-of-range value."""


class DataError(SlideSearchError):
    """Malformed or inconsistent input data (files, grids, graphs)."""


class NumericError(SlideSearchError):
    """Numerical failure: non-finite values, divergence."""
