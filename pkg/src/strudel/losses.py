"""Segmentation losses: soft Dice, BCE, uncertainty-weighted BCE, routed sum.

All functions take probability maps (after the sigmoid) and are written in
torch so autograd supplies exact gradients. Numpy inputs are accepted and
promoted to float64 tensors.

Routing decides the cross-entropy flavour per sample:

* ``FIXED`` (source labels, accepted pseudo labels in D_fix): Dice + BCE
* ``PSEUDO`` (current pseudo labels during re-training): Dice + UBCE, where
  each pixel's BCE term is scaled by ``1 - sigma`` and ``sigma`` is the
  rescaled MC-dropout variance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DomainError, RoutingError, ShapeError


class Routing(str, enum.Enum):
    FIXED = "fixed_label"
    PSEUDO = "pseudo_label_with_uncertainty"


@dataclass(frozen=True)
class LossConfig:
    bce_clamp_epsilon: float = 1e-7
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not 0 < self.bce_clamp_epsilon < 0.5:
            raise ConfigError(f"bce_clamp_epsilon must be in (0, 0.5), got {self.bce_clamp_epsilon}")
        if self.dice_smooth <= 0:
            raise ConfigError(f"dice_smooth must be > 0, got {self.dice_smooth}")


DEFAULT = LossConfig()


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def bce_map(pred, target, eps=DEFAULT.bce_clamp_epsilon):
    """Per-pixel binary cross entropy with probabilities clamped to [eps, 1-eps]."""
    pred = _t(pred)
    target = _t(target, pred)
    _check_pair(pred, target)
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p))


def bce(pred, target, cfg: LossConfig = DEFAULT):
    return bce_map(pred, target, cfg.bce_clamp_epsilon).mean()


def _check_sigma(sigma, pred):
    sigma = _t(sigma, pred)
    if sigma.shape != pred.shape:
        raise ShapeError(f"sigma shape {tuple(sigma.shape)} != pred shape {tuple(pred.shape)}")
    if bool((sigma < 0).any()) or bool((sigma > 1).any()):
        raise DomainError("uncertainty weights must lie in [0, 1]")
    return sigma


def ubce(pred, target, sigma, cfg: LossConfig = DEFAULT):
    """Mean over pixels of ``(1 - sigma) * BCE``."""
    pred = _t(pred)
    sigma = _check_sigma(sigma, pred)
    return ((1 - sigma) * bce_map(pred, target, cfg.bce_clamp_epsilon)).mean()


def dice_loss(pred, target, cfg: LossConfig = DEFAULT):
    """Soft Dice loss ``1 - (2 sum(p t) + s) / (sum p + sum t + s)``."""
    pred = _t(pred)
    target = _t(target, pred)
    _check_pair(pred, target)
    s = cfg.dice_smooth
    return 1 - (2 * (pred * target).sum() + s) / (pred.sum() + target.sum() + s)


def combined_loss(pred, target, sigma=None, routing=Routing.FIXED, cfg: LossConfig = DEFAULT):
    """Loss of one sample and its ``{"dice", "bce", "ubce"}`` breakdown.

    The unused cross-entropy component is reported as an exact zero.
    """
    routing = Routing(routing)
    if routing is Routing.PSEUDO and sigma is None:
        raise RoutingError("pseudo-label routing requires an uncertainty map")
    if routing is Routing.FIXED and sigma is not None:
        raise RoutingError("fixed-label routing takes no uncertainty map")
    pred = _t(pred)
    zero = pred.new_zeros(())
    d = dice_loss(pred, target, cfg)
    if routing is Routing.FIXED:
        parts = {"dice": d, "bce": bce(pred, target, cfg), "ubce": zero}
    else:
        parts = {"dice": d, "bce": zero, "ubce": ubce(pred, target, sigma, cfg)}
    total = parts["dice"] + parts["bce"] + parts["ubce"]
    return total, parts


def batch_loss(pred, target, sigma, is_pseudo, cfg: LossConfig = DEFAULT):
    """Routed loss over a ``(B, 1, H, W)`` batch, mean of per-sample losses.

    ``sigma`` holds zeros for fixed samples; ``is_pseudo`` is a ``(B,)``
    boolean tensor. Per-sample values are the same as :func:`combined_loss`.
    """
    _check_pair(pred, target)
    dims = tuple(range(1, pred.dim()))
    s = cfg.dice_smooth
    dice = 1 - (2 * (pred * target).sum(dims) + s) / (pred.sum(dims) + target.sum(dims) + s)
    ce = bce_map(pred, target, cfg.bce_clamp_epsilon)
    weight = torch.where(is_pseudo.view(-1, *([1] * (pred.dim() - 1))), 1 - sigma, torch.ones_like(sigma))
    ce = (weight * ce).mean(dims)
    n = pred.shape[0]
    zero = ce.new_zeros(())
    parts = {
        "dice": dice.sum() / n,
        "bce": torch.where(is_pseudo, zero, ce).sum() / n,
        "ubce": torch.where(is_pseudo, ce, zero).sum() / n,
    }
    total = (dice + ce).sum() / n
    return total, parts
