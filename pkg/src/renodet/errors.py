"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class RenodetError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(RenodetError):
    """Invalid or inconsistent configuration."""


class DataError(RenodetError):
    """Malformed, missing, or out-of-contract input data."""


class NumericError(RenodetError):
    """Numerical failure (NaN gradients, degenerate geometry, ...)."""
