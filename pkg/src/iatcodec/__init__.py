"""Variable-rate lossy image codec with an invertible transform conditioned
on a per-pixel quality level."""

__version__ = "0.1.0"

from .iat import QualityLevel
from .model import ArchitectureConfig, CodecModel
from .rate import RateControlConfig

__all__ = ["ArchitectureConfig", "CodecModel", "QualityLevel", "RateControlConfig", "__version__"]
