"""Few-shot GAN transfer by inversion-based feature distillation on generator and discriminator."""

from .backbone import (
    ExtendedStyleCode,
    FeaturePyramid,
    GanSnapshot,
    NetworkConfig,
    discriminate,
    generate,
    init_target_from_source,
    map_noise,
    new_snapshot,
    parameter_hash,
    synthesize,
)
from .losses import LayerMask, LossWeights, MMDConfig, mmd
from .trainer import StepRecord, TransferConfig, pretrain, transfer

__version__ = "0.1.0"

__all__ = [
    "ExtendedStyleCode",
    "FeaturePyramid",
    "GanSnapshot",
    "NetworkConfig",
    "discriminate",
    "generate",
    "init_target_from_source",
    "map_noise",
    "new_snapshot",
    "parameter_hash",
    "synthesize",
    "LayerMask",
    "LossWeights",
    "MMDConfig",
    "mmd",
    "StepRecord",
    "TransferConfig",
    "pretrain",
    "transfer",
]
