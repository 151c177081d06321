"""Dual-path segmentation model: config, blocks, fusion, and the network."""

from .config import ModelConfig, StageConfig, reference_config, synthetic_config, toy_config
from .fusion import (
    NEIGHBOR_OFFSETS,
    AdaptiveFusion,
    FusionTensors,
    neighbor_similarity,
    resample_features,
)
from .network import Decoder, DualPathSegmenter, LogitsField, zero_offsets_

__all__ = [
    "ModelConfig",
    "StageConfig",
    "toy_config",
    "synthetic_config",
    "reference_config",
    "NEIGHBOR_OFFSETS",
    "AdaptiveFusion",
    "FusionTensors",
    "neighbor_similarity",
    "resample_features",
    "Decoder",
    "DualPathSegmenter",
    "LogitsField",
    "zero_offsets_",
]
