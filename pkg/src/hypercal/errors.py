"""Exception hierarchy shared across the package."""


class HypercalError(Exception):
    """Base class for all package-specific failures."""


class CubeFormatError(HypercalError):
    """Raised for malformed cube files, headers, or invalid cube contents."""


class EstimationError(HypercalError):
    """Raised when an estimator cannot produce a result (featureless input,
    missing reference data, low confidence)."""


class ConfigError(HypercalError):
    """Raised for invalid pipeline configuration."""
