from .config import PRESETS, TrainConfig, apply_overrides, load_config, micro_config, pair_weight, reduced_config
from .losses import (
    loss_depth_range,
    loss_flow,
    loss_gradient_pairs,
    loss_photometric,
    loss_regularization,
    total_loss,
)
from .sampling import Batch, BatchSampler, refresh_error_maps, uniform_error_maps
from .trainer import DivergenceMonitor, NonFiniteLossError, Trainer, compute_losses, train

__all__ = [
    "Batch",
    "BatchSampler",
    "DivergenceMonitor",
    "NonFiniteLossError",
    "PRESETS",
    "TrainConfig",
    "Trainer",
    "apply_overrides",
    "compute_losses",
    "load_config",
    "loss_depth_range",
    "loss_flow",
    "loss_gradient_pairs",
    "loss_photometric",
    "loss_regularization",
    "micro_config",
    "pair_weight",
    "reduced_config",
    "refresh_error_maps",
    "total_loss",
    "train",
    "uniform_error_maps",
]
