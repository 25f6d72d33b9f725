"""Focal loss for binary manipulation masks."""

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffOp
from .tensor import ShapeError

__all__ = ["FocalConfig", "focal_loss", "focal_loss_vjp", "focal_loss_op"]

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must be in (0, 0.5), got {self.clamp_eps}")


def _check(y, target, reduction):
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target)
    if y.shape != target.shape:
        raise ShapeError(f"prediction shape {y.shape} != target shape {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("ground-truth entries must be 0 or 1")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    return y, target.astype(np.float64)


def focal_loss(y, target, cfg=FocalConfig(), reduction="sum"):
    """``-sum(a (1-y)^g t log y + (1-a) y^g (1-t) log(1-y))`` with ``y`` clamped."""
    y, t = _check(y, target, reduction)
    eps = cfg.clamp_eps
    yc = np.clip(y, eps, 1.0 - eps)
    a, g = cfg.alpha, cfg.gamma
    per = -(a * (1.0 - yc) ** g * t * np.log(yc)
            + (1.0 - a) * yc ** g * (1.0 - t) * np.log1p(-yc))
    total = float(np.sum(per))
    return total / per.size if reduction == "mean" else total


def focal_loss_vjp(y, target, cfg=FocalConfig(), upstream=1.0, reduction="sum"):
    """Gradient of :func:`focal_loss` w.r.t. ``y``; zero where clamping is active."""
    y, t = _check(y, target, reduction)
    eps = cfg.clamp_eps
    yc = np.clip(y, eps, 1.0 - eps)
    a, g = cfg.alpha, cfg.gamma
    log_y = np.log(yc)
    log_1my = np.log1p(-yc)
    if g == 0:
        pos = -a / yc
        neg = (1.0 - a) / (1.0 - yc)
    else:
        pos = -a * (-g * (1.0 - yc) ** (g - 1.0) * log_y + (1.0 - yc) ** g / yc)
        neg = -(1.0 - a) * (g * yc ** (g - 1.0) * log_1my - yc ** g / (1.0 - yc))
    grad = t * pos + (1.0 - t) * neg
    grad = np.where((y < eps) | (y > 1.0 - eps), 0.0, grad)
    scale = float(upstream) / (y.size if reduction == "mean" else 1)
    return grad * scale


def focal_loss_op(target, cfg=FocalConfig(), reduction="sum"):
    """``y -> loss`` with the mask bound; the loss is a 0-d array."""
    def forward(y):
        return (np.asarray(focal_loss(y, target, cfg, reduction)),), y

    def vjp(y, g):
        return (focal_loss_vjp(y, target, cfg, float(g), reduction),)

    return DiffOp("focal_loss", forward, vjp, 1)
