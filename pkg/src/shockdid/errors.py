"""Exception types shared across the package."""


class ShockDidError(Exception):
    """Base class for all package errors."""


class SchemaError(ShockDidError):
    """Input file or mapping does not provide a required column."""


class IntegrityError(ShockDidError):
    """Input data violates a panel invariant (e.g. duplicate unit-year rows)."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class RankDeficientError(ShockDidError, ValueError):
    """Design matrix is (numerically) rank deficient."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"rank deficient design; collinear columns: {', '.join(self.columns)}")


class EstimationError(ShockDidError):
    """An estimator could not produce a result for the requested input."""


class ConfigError(ShockDidError):
    """Invalid run configuration."""
