"""Loss terms. All are means over their entries so magnitudes do not depend on batch size."""

from __future__ import annotations

import torch

from ..model import FAR, NEAR


def loss_flow(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted mean over correspondences of the L1 norm of the flow error."""
    err = (pred - target).abs().sum(-1)
    if weights is not None:
        err = err * weights
    return err.mean()


def loss_photometric(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).sum(-1).mean()


def loss_regularization(x_prev: torch.Tensor, x: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
    """Mean L1 norm of the 3D acceleration x_next + x_prev - 2x."""
    return (x_next + x_prev - 2.0 * x).abs().sum(-1).mean()


def loss_gradient_pairs(pred: torch.Tensor, target: torch.Tensor, idx1: torch.Tensor, idx2: torch.Tensor) -> torch.Tensor:
    """Mean L1 mismatch between predicted and observed differences over index pairs."""
    d_pred = pred[idx1] - pred[idx2]
    d_obs = target[idx1] - target[idx2]
    return (d_pred - d_obs).abs().sum(-1).mean()


def loss_depth_range(z: torch.Tensor, near: float = NEAR, far: float = FAR) -> torch.Tensor:
    return (torch.relu(z - far) + torch.relu(near - z)).mean()


def total_loss(components: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    """Flow loss plus the weighted auxiliaries; missing components count as zero."""
    total = components["flow"]
    for name, w in weights.items():
        if name in components and w != 0.0:
            total = total + w * components[name]
    return total
