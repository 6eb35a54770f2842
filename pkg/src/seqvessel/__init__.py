"""Temporal-spatial vessel segmentation for 2D+t image sequences.

Self-contained numpy implementation: tensor helpers, differentiable layer
ops with hand-derived backward passes, the encoder/fusion/attention network,
Dice and cross-entropy objectives, segmentation metrics, a synthetic
sequence generator, and a deterministic training harness.
"""

from .augment import AugmentConfig, augment
from .losses import ce_loss, dice_loss
from .metrics import ConfusionCounts, MetricsRecord, binarize, gve, segmentation_metrics
from .network import (FrameWindow, Network, NetworkConfig, ParameterStore,
                      build, param_count)
from .synth import SynthConfig, synthesize
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, sgd_step, train

__all__ = [
    "AugmentConfig", "augment", "ce_loss", "dice_loss", "ConfusionCounts",
    "MetricsRecord", "binarize", "gve", "segmentation_metrics", "FrameWindow",
    "Network", "NetworkConfig", "ParameterStore", "build", "param_count",
    "SynthConfig", "synthesize", "TrainConfig", "evaluate", "load_checkpoint",
    "save_checkpoint", "sgd_step", "train",
]

__version__ = "0.1.0"
