"""Image -> radial depth network: model, loss, training and inference."""

from .loss import LossSpec, composite_loss, ssim
from .net import ReconNet, TinyConvNet
from .train import TrainConfig, backward_and_step, make_optimizer, predict, train

__all__ = [
    "LossSpec",
    "ReconNet",
    "TinyConvNet",
    "TrainConfig",
    "backward_and_step",
    "composite_loss",
    "make_optimizer",
    "predict",
    "ssim",
    "train",
]
