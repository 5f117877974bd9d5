"""Siamese verification person re-identification on a numpy autodiff core."""

from .backbone import BackboneConfig, ModelParams, build_model, forward_features, scale_config
from .head import PairLabel, VerificationHead, pair_score
from .tensor import Tensor, backward

__all__ = [
    "BackboneConfig",
    "ModelParams",
    "PairLabel",
    "Tensor",
    "VerificationHead",
    "backward",
    "build_model",
    "forward_features",
    "pair_score",
    "scale_config",
]
