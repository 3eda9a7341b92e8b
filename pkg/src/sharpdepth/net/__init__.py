"""Refinement networks: model, losses, optimizer and training loop."""

from .losses import LOSSES, loss_eval
from .model import NetConfig, DisplacementNet, build_network, count_parameters
from .optim import Adam, poly_lr
from .train import TrainConfig, train, refine, predict, save_checkpoint, load_checkpoint

__all__ = [
    "LOSSES", "loss_eval", "NetConfig", "DisplacementNet", "build_network", "count_parameters",
    "Adam", "poly_lr", "TrainConfig", "train", "refine", "predict", "save_checkpoint", "load_checkpoint",
]
