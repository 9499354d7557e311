"""RGB+depth action recognition on synthetic video, built from scratch:
autodiff tensor core, procedural dataset, side-tuned transformer and
selective state-space encoders, gated cross-attention fusion, training
and ablation tooling."""

from .errors import (ConfigError, ContractError, FormatError, NumericError,
                     ShapeError)
from .model import ActionModel, ModelConfig
from .synthvid import GenConfig, VideoClip, generate_clip
from .tensor import ComputationRecord, Tensor, backward, check_gradient
from .training import AdamW, ClipProvider, TrainConfig, cross_entropy, evaluate, train

__all__ = [
    "ActionModel", "ModelConfig", "GenConfig", "VideoClip", "generate_clip",
    "ComputationRecord", "Tensor", "backward", "check_gradient",
    "AdamW", "ClipProvider", "TrainConfig", "cross_entropy", "evaluate", "train",
    "ConfigError", "ContractError", "FormatError", "NumericError", "ShapeError",
]
