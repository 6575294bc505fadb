"""Joint RGB/Depth semantic segmentation training with disentangled
invariant/specific embeddings, plus teacher/student distillation baselines."""

from .core import (
    IGNORE_INDEX,
    ConfigError,
    FeatureVolume,
    LossReport,
    Modality,
    PooledEmbedding,
    RGBDSample,
    TrainConfig,
    load_config,
    validate_config,
)

__all__ = [
    "IGNORE_INDEX",
    "ConfigError",
    "FeatureVolume",
    "LossReport",
    "Modality",
    "PooledEmbedding",
    "RGBDSample",
    "TrainConfig",
    "load_config",
    "validate_config",
]

__version__ = "0.1.0"
