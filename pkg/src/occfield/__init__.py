"""Occupancy fields in contracted coordinates, fitted to posed multi-camera images."""
from .contraction import ContractionParams, contract_point, invert_point
from .errors import (ConfigurationError, InvalidParameterError, NumericalError, OccFieldError,
                     OutOfDomainError)
from .frames import FrameSet
from .geometry import CameraModel, Pose
from .grid import OccupancyGrid
from .photometric import LossConfig

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "ConfigurationError", "ContractionParams", "FrameSet", "InvalidParameterError",
    "LossConfig", "NumericalError", "OccFieldError", "OccupancyGrid", "OutOfDomainError", "Pose",
    "contract_point", "invert_point",
]
