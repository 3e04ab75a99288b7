"""Backdoor poisoning and perturb-and-recover cleaning for a small image-text dual encoder."""

from .estimators import CleanClipBaseline, DualEncoder, PerturbAndRecover, TriggerTransformer, ZeroShotClassifier
from .losses import ParLossConfig, clip_loss, embedding_distance, par_objective, pert_loss, uniaug_loss
from .numerics import Rng
from .triggers import TriggerSpec, Variant, apply_trigger

__version__ = "0.1.0"

__all__ = [
    "CleanClipBaseline",
    "DualEncoder",
    "PerturbAndRecover",
    "TriggerTransformer",
    "ZeroShotClassifier",
    "ParLossConfig",
    "clip_loss",
    "uniaug_loss",
    "embedding_distance",
    "pert_loss",
    "par_objective",
    "Rng",
    "TriggerSpec",
    "Variant",
    "apply_trigger",
]
