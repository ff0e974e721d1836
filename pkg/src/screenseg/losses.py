"""Segmentation and classification losses (torch, autograd-compatible).

All segmentation losses take ``pred`` and ``target`` of shape ``(..., H, W)``.
Per-frame values are computed over the last two axes and averaged over any
leading (batch/channel) axes, so a single 2D map yields its own value.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import torch
import torch.nn.functional as F

SMOOTH = 1e-6
EPS = 1e-7
LOSS_NAMES = ("dice", "dice_bce", "w_bce")


@dataclass(frozen=True)
class ClassWeights:
    w0: float  # multiplies x * log(p)
    w1: float  # multiplies (1 - x) * log(1 - p)

    def __post_init__(self):
        if self.w0 < 0 or self.w1 < 0:
            raise ValueError(f"class weights must be non-negative, got {self}")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _pair(pred, target):
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.ndim < 2:
        raise ValueError("inputs must be at least 2D (..., H, W)")
    return pred, target.to(pred.dtype)


def _per_frame_sum(x: torch.Tensor) -> torch.Tensor:
    return x.sum(dim=(-2, -1))


def soft_dice(pred, target, smooth: float = SMOOTH) -> torch.Tensor:
    """(2 sum(p * t) + s) / (sum(p) + sum(t) + s), averaged over frames."""
    pred, target = _pair(pred, target)
    inter = _per_frame_sum(pred * target)
    denom = _per_frame_sum(pred) + _per_frame_sum(target)
    return ((2 * inter + smooth) / (denom + smooth)).mean()


def dice_loss(pred, target, smooth: float = SMOOTH) -> torch.Tensor:
    return 1 - soft_dice(pred, target, smooth)


def _reduce(per_pixel: torch.Tensor, reduction: str) -> torch.Tensor:
    per_frame = _per_frame_sum(per_pixel)
    if reduction == "mean":
        per_frame = per_frame / (per_pixel.shape[-2] * per_pixel.shape[-1])
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return per_frame.mean()


def bce(pred, target, reduction: str = "mean", eps: float = EPS) -> torch.Tensor:
    pred, target = _pair(pred, target)
    p = pred.clamp(eps, 1 - eps)
    per_pixel = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    return _reduce(per_pixel, reduction)


def dice_bce(pred, target, reduction: str = "mean") -> torch.Tensor:
    return 0.5 * dice_loss(pred, target) + 0.5 * bce(pred, target, reduction)


def class_weights(target) -> ClassWeights:
    """w1 = 1 / max(1, #positive pixels), w0 = 1 - w1 (soft targets counted at >= 0.5)."""
    t = np.asarray(target.detach().cpu() if isinstance(target, torch.Tensor) else target)
    n_pos = int((t >= 0.5).sum())
    w1 = 1.0 / max(1, n_pos)
    return ClassWeights(w0=1.0 - w1, w1=w1)


def _batch_weights(target: torch.Tensor):
    n_pos = _per_frame_sum((target >= 0.5).to(target.dtype))
    w1 = 1.0 / n_pos.clamp(min=1)
    return (1 - w1)[..., None, None], w1[..., None, None]


def w_bce(
    pred,
    target,
    weights: ClassWeights | None = None,
    reduction: str = "mean",
    swap_wbce_weights: bool = False,
    eps: float = EPS,
) -> torch.Tensor:
    """Weighted BCE: -sum(w0 x log p + w1 (1 - x) log(1 - p)).

    ``weights=None`` derives them per frame with :func:`class_weights`.
    ``swap_wbce_weights`` exchanges which term each weight multiplies.
    """
    pred, target = _pair(pred, target)
    if weights is None:
        w0, w1 = _batch_weights(target)
    else:
        w0, w1 = weights.w0, weights.w1
    if swap_wbce_weights:
        w0, w1 = w1, w0
    p = pred.clamp(eps, 1 - eps)
    per_pixel = -(w0 * target * torch.log(p) + w1 * (1 - target) * torch.log(1 - p))
    return _reduce(per_pixel, reduction)


def classifier_bce(logits, targets) -> torch.Tensor:
    """Binary cross-entropy on raw logits (one per frame)."""
    logits, targets = _tensor(logits), _tensor(targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def get_loss(name: str, reduction: str = "mean", swap_wbce_weights: bool = False):
    """Loss callable ``f(pred, target)`` for ``dice | dice_bce | w_bce``."""
    if name == "dice":
        return dice_loss
    if name == "dice_bce":
        return partial(dice_bce, reduction=reduction)
    if name == "w_bce":
        return partial(w_bce, reduction=reduction, swap_wbce_weights=swap_wbce_weights)
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
