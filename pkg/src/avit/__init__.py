"""Adapted vision transformer for skin-lesion segmentation, on a small numpy autodiff engine."""
from .backbone import TOY, VIT_B16, VIT_L16, BackboneConfig
from .errors import (
    AvitError,
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    ParseError,
)
from .model import VARIANTS, Model, ModelConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "TOY", "VIT_B16", "VIT_L16", "BackboneConfig", "VARIANTS", "Model", "ModelConfig", "build_model",
    "AvitError", "CheckpointFormatError", "ConfigError", "ContractError", "DimensionError", "InputError", "ParseError",
]
