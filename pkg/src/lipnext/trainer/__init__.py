"""Data, loss, configuration, checkpoints, training loop and CLI."""
from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint, save_model
from .config import TrainConfig, load_config
from .data import Dataset, load_cifar_bin, load_mnist_idx
from .loss import margin_loss
from .train import fit, train_epoch

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
    "save_model",
    "TrainConfig",
    "load_config",
    "Dataset",
    "load_cifar_bin",
    "load_mnist_idx",
    "margin_loss",
    "fit",
    "train_epoch",
]
