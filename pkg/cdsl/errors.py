"""Exception types raised across the toolkit."""


class CDSLError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CDSLError, ValueError):
    """Invalid configuration value or combination."""


class DataError(CDSLError, ValueError):
    """Dataset content or layout does not meet the ingestion contract."""


class ShapeError(CDSLError, ValueError):
    """Tensor or parameter shapes are incompatible."""


class CheckpointError(CDSLError, ValueError):
    """Checkpoint or manifest cannot be read."""


class NumericalError(CDSLError, ArithmeticError):
    """A NaN or Inf appeared during a numeric computation."""
