"""Export frozen ViT patch features into foresight's feature-file format."""

from .encoder import REGISTRY, EncoderConfig, VisionEncoder, build_encoder, encoder_config
from .errors import ExporterError, MissingFramesError, ParameterError
from .export import ExportSpec, export_features

__all__ = [
    "REGISTRY",
    "EncoderConfig",
    "VisionEncoder",
    "build_encoder",
    "encoder_config",
    "ExporterError",
    "MissingFramesError",
    "ParameterError",
    "ExportSpec",
    "export_features",
]
