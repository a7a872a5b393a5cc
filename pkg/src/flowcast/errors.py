"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is a plain bug.
"""


class FlowcastError(Exception):
    pass


class ConfigError(FlowcastError):
    """Bad configuration: missing paths, invalid values, inconsistent options."""


class DataError(FlowcastError):
    """Malformed or insufficient input data (schema violations, missing nodes)."""


class NumericalError(FlowcastError):
    """Degenerate or diverging numerics (zero kernel width, non-finite loss)."""
