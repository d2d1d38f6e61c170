"""Classification and segmentation losses on probabilities."""

from __future__ import annotations

import torch

EPS = 1e-7


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(eps, 1 - eps)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def focal_bce(pred, target, gamma: float = 2.0, alpha: float = 0.25, eps: float = EPS) -> torch.Tensor:
    """Mean of -alpha_t * (1 - p_t)**gamma * log(p_t)."""
    _check(pred, target)
    p = pred.clamp(eps, 1 - eps)
    t = target.to(p.dtype)
    p_t = t * p + (1 - t) * (1 - p)
    alpha_t = t * alpha + (1 - t) * (1 - alpha)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred, target, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(pred*target) + smooth) / (sum(pred) + sum(target) + smooth)."""
    _check(pred, target)
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + t.sum() + smooth)


def seg_loss(pred, target, smooth: float = 1.0, eps: float = EPS) -> torch.Tensor:
    """Unweighted sum of pixelwise BCE and dice loss."""
    return bce(pred, target, eps) + dice_loss(pred, target, smooth)
