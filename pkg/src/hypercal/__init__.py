"""Closed-loop hyperspectral pushbroom simulator and calibration pipeline."""

from .errors import (HypercalError, CubeFormatError, EstimationError,
                     ConfigError)
from .cube import (SpectralCube, BandMeta, RegionOfInterest, read_cube,
                   write_cube, region_stats, DN_MAX)

__version__ = "0.1.0"

__all__ = [
    "HypercalError", "CubeFormatError", "EstimationError", "ConfigError",
    "SpectralCube", "BandMeta", "RegionOfInterest", "read_cube",
    "write_cube", "region_stats", "DN_MAX", "__version__",
]
