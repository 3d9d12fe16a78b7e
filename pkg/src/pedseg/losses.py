"""Hybrid segmentation objectives.

Two families: binary cross-entropy combined with Dice loss, and binary
cross-entropy combined with the Generalized Dice Loss whose class weights
are the inverse squared ground-truth volumes. All functions accept torch
tensors or numpy arrays, preserve the input dtype (use float64 inputs for
high-precision checks), and differentiate through ``y_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError

LOSS_FAMILIES = ("bce_dice", "bce_gdl")


@dataclass(frozen=True)
class LossConfig:
    """Loss family selector plus weighting and stabilization constants."""

    family: str = "bce_dice"
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-6
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.family not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must lie in (0, 0.5)")


def _as_class_planes(y_hat, y):
    """Validate a prediction/target pair and flatten to (classes, voxels).

    Tensors of rank 5 are read as (batch, class, x, y, z); lower ranks put
    the class axis first. Targets must be binary, predictions in [0, 1].
    """
    y_hat = torch.as_tensor(y_hat)
    if not y_hat.is_floating_point():
        y_hat = y_hat.double()
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    if y_hat.shape != y.shape:
        raise ShapeMismatchError(
            f"prediction shape {tuple(y_hat.shape)} != target shape {tuple(y.shape)}"
        )
    if y_hat.dim() < 2:
        raise ShapeMismatchError("expected at least (class, voxel) dimensions")
    if y_hat.dim() == 5:
        y_hat = y_hat.transpose(0, 1)
        y = y.transpose(0, 1)
    flat_hat = y_hat.reshape(y_hat.shape[0], -1)
    flat = y.reshape(y.shape[0], -1)
    with torch.no_grad():
        if flat_hat.numel():
            if flat_hat.min() < 0 or flat_hat.max() > 1:
                raise ValueError("predicted probabilities must lie in [0, 1]")
            if not ((flat == 0) | (flat == 1)).all():
                raise ValueError("targets must be binary")
    return flat_hat, flat


def bce(y_hat, y, clamp: float = 1e-7):
    """Mean binary cross-entropy over all voxels and classes.

    Probabilities are clamped to [clamp, 1 - clamp] so the log terms stay
    finite even for saturated predictions.
    """
    p, t = _as_class_planes(y_hat, y)
    p = p.clamp(clamp, 1.0 - clamp)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def dice_loss(y_hat, y, eps: float = 1e-6):
    """Soft Dice loss, averaged over the class channels.

    Per class: 1 - (2 * sum(y * y_hat) + eps) / (sum(y) + sum(y_hat) + eps).
    An all-empty class scores 0 (the eps/eps ratio), so perfect emptiness
    is not penalized.
    """
    p, t = _as_class_planes(y_hat, y)
    inter = (t * p).sum(dim=1)
    denom = t.sum(dim=1) + p.sum(dim=1)
    per_class = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return per_class.mean()


def gdl(y_hat, y, eps: float = 1e-6):
    """Generalized Dice Loss with inverse squared-volume class weights.

    w_c = 1 / (sum_i y_ci)^2; classes with no ground-truth voxels would
    get an infinite weight, so those are capped at the largest finite
    weight present (1 if every class is empty), keeping the loss finite
    without distorting the nonempty classes.
    """
    p, t = _as_class_planes(y_hat, y)
    sizes = t.sum(dim=1)
    with torch.no_grad():
        w = 1.0 / (sizes * sizes)
        finite = torch.isfinite(w)
        cap = w[finite].max() if finite.any() else torch.ones_like(w[0])
        w = torch.where(finite, w, cap)
    inter = (t * p).sum(dim=1)
    denom = t.sum(dim=1) + p.sum(dim=1)
    return 1.0 - (2.0 * (w * inter).sum() + eps) / ((w * denom).sum() + eps)


def combined_bce_dice(y_hat, y, cfg: LossConfig):
    """alpha * BCE + beta * Dice loss."""
    if cfg.family != "bce_dice":
        raise ValueError(f"config family is {cfg.family!r}, expected 'bce_dice'")
    return cfg.alpha * bce(y_hat, y, cfg.prob_clamp) + cfg.beta * dice_loss(
        y_hat, y, cfg.epsilon
    )


def combined_bce_gdl(y_hat, y, cfg: LossConfig):
    """alpha * BCE + beta * Generalized Dice Loss."""
    if cfg.family != "bce_gdl":
        raise ValueError(f"config family is {cfg.family!r}, expected 'bce_gdl'")
    return cfg.alpha * bce(y_hat, y, cfg.prob_clamp) + cfg.beta * gdl(
        y_hat, y, cfg.epsilon
    )


def combined_loss(y_hat, y, cfg: LossConfig):
    """Dispatch to the configured hybrid objective."""
    if cfg.family == "bce_dice":
        return combined_bce_dice(y_hat, y, cfg)
    return combined_bce_gdl(y_hat, y, cfg)


def gdl_class_weights(y) -> np.ndarray:
    """Expose the per-class weights (with empty-class capping) for auditing."""
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    flat = y.reshape(y.shape[0], -1) if y.dim() != 5 else y.transpose(0, 1).reshape(y.shape[1], -1)
    sizes = flat.sum(dim=1)
    w = 1.0 / (sizes * sizes)
    finite = torch.isfinite(w)
    cap = w[finite].max() if finite.any() else torch.ones_like(w[0])
    return torch.where(finite, w, cap).numpy()
