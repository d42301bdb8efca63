"""Exception types shared across the package."""


class TaclrError(Exception):
    """Base class for all errors raised by this package."""


class TaxonomyError(TaclrError):
    """Malformed taxonomy file or query against a missing pair."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(TaclrError):
    """Malformed dataset, prediction file, or invalid item."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(TaclrError):
    """Invalid configuration value."""


class StaleIndexError(TaclrError):
    """Value index was built from different encoder parameters."""


class TrainingError(TaclrError):
    """Training failed (non-finite loss or invalid item)."""
