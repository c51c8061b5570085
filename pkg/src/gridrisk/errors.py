"""Exception types shared across the pipeline."""


class GridRiskError(Exception):
    """Base class for all gridrisk errors."""


class FormatError(GridRiskError):
    """An input file does not have the expected layout."""


class DataError(GridRiskError):
    """Input content is present but unusable (bad values, impossible records)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(GridRiskError):
    """A run configuration or architecture description is inconsistent."""


class NumericError(GridRiskError):
    """A non-finite value appeared during a forward pass or training."""
