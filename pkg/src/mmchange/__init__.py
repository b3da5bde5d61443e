"""Multimodal bitemporal change detection: image + caption fusion network,
synthetic data tooling, training recipe and evaluation metrics."""

from .model import ChangeDetector, ModelConfig, build_model, load_checkpoint, predict_mask, save_checkpoint
from .training import TrainConfig, evaluate, gradcheck, poly_lr, train

__all__ = [
    "ChangeDetector",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "evaluate",
    "gradcheck",
    "load_checkpoint",
    "poly_lr",
    "predict_mask",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
