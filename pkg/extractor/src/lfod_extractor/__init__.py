"""Pooled multi-stage feature extraction from pretrained CNN backbones."""

from .encoders import (
    EFFICIENTNET_B4,
    ENCODERS,
    RESNET50,
    EncoderSpec,
    StageTap,
    TappedEncoder,
    global_average_pool,
)
from .extract import (
    ExtractionError,
    ExtractionReport,
    ExtractorConfig,
    run_extraction,
)

__version__ = "0.1.0"

__all__ = [
    "EFFICIENTNET_B4",
    "ENCODERS",
    "RESNET50",
    "EncoderSpec",
    "ExtractionError",
    "ExtractionReport",
    "ExtractorConfig",
    "StageTap",
    "TappedEncoder",
    "global_average_pool",
    "run_extraction",
]
