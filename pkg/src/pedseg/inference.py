"""Per-model prediction and ensemble fusion.

Prediction runs a sliding window over the volume with Gaussian-weighted
overlap blending (windows near their centers count more), padding the
volume up to the window size and cropping back afterwards. Fusion
follows the two-stage rule: within a group, member logits are summed
and thresholded; across groups, a per-voxel majority vote decides, with
a configurable tie break for even group counts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoints import load_model_handle
from .errors import (
    EmptyGroupError,
    OOMShapeError,
    ShapeMismatchError,
    UntrainedModelWarning,
)
from .models import ModelHandle, check_divisible
from .validation import REGION_NAMES
from .volume import MultiModalVolume, RegionMaskSet

# Crude memory guard for a single inference window.
MAX_WINDOW_VOXELS = 320**3


@dataclass
class LogitsVolume:
    """Raw 3-channel model output aligned with the source volume grid."""

    data: np.ndarray  # (3, X, Y, Z)
    source_model: str = ""
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(REGION_NAMES):
            raise ShapeMismatchError(
                f"logits must be (3, X, Y, Z), got {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("logits contain non-finite values")

    @property
    def shape(self):
        return tuple(self.data.shape[1:])


def gaussian_window_weights(patch_size, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian importance map over a window, peak 1 at center."""
    axes = []
    for size in patch_size:
        coords = np.arange(size, dtype=np.float64)
        center = (size - 1) / 2.0
        sigma = max(size * sigma_scale, 1e-3)
        axes.append(np.exp(-0.5 * ((coords - center) / sigma) ** 2))
    weights = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    weights /= weights.max()
    return np.maximum(weights, 1e-6)


def _window_starts(size: int, patch: int, stride: int):
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _forward_window(model, window: np.ndarray) -> np.ndarray:
    if isinstance(model, ModelHandle):
        model.module.eval()
        with torch.no_grad():
            out = model.module(torch.from_numpy(window).unsqueeze(0))
        return out.squeeze(0).numpy()
    return np.asarray(model(window), dtype=np.float32)


def predict_logits(model, vol: MultiModalVolume, patch_size=(96, 96, 96),
                   overlap: float = 0.5) -> LogitsVolume:
    """Sliding-window forward pass with Gaussian-blended overlaps.

    ``model`` is a ModelHandle or any callable mapping a (4, x, y, z)
    float32 window to (3, x, y, z) logits. The volume is zero-padded up
    to the window size (and the result cropped back), so any volume
    shape is accepted as long as the window itself suits the model.
    """
    patch_size = tuple(int(p) for p in patch_size)
    if len(patch_size) != 3:
        raise ValueError("patch_size must have 3 components")
    if np.prod(patch_size) > MAX_WINDOW_VOXELS:
        raise OOMShapeError(
            f"window {patch_size} exceeds {MAX_WINDOW_VOXELS} voxels; "
            f"use a smaller patch"
        )
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap fraction must be in [0, 1)")
    if isinstance(model, ModelHandle):
        check_divisible(patch_size, model.spec)
        if not model.is_trained:
            warnings.warn(
                "predicting with an untrained model", UntrainedModelWarning,
                stacklevel=2,
            )

    data = np.asarray(vol.data, dtype=np.float32)
    original = data.shape[1:]
    pad = [(0, max(p - s, 0)) for s, p in zip(original, patch_size)]
    padded = np.pad(data, [(0, 0)] + pad)
    shape = padded.shape[1:]

    weights = gaussian_window_weights(patch_size)
    accum = np.zeros((len(REGION_NAMES), *shape), dtype=np.float64)
    weight_sum = np.zeros(shape, dtype=np.float64)
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch_size]
    for x0 in _window_starts(shape[0], patch_size[0], strides[0]):
        for y0 in _window_starts(shape[1], patch_size[1], strides[1]):
            for z0 in _window_starts(shape[2], patch_size[2], strides[2]):
                sl = (slice(x0, x0 + patch_size[0]),
                      slice(y0, y0 + patch_size[1]),
                      slice(z0, z0 + patch_size[2]))
                logits = _forward_window(model, padded[(slice(None), *sl)])
                accum[(slice(None), *sl)] += logits * weights
                weight_sum[sl] += weights

    blended = accum / weight_sum
    crop = (slice(None),) + tuple(slice(0, s) for s in original)
    name = model.spec.variant_name if isinstance(model, ModelHandle) else ""
    return LogitsVolume(data=blended[crop].astype(np.float32),
                        source_model=name, case_id=vol.case_id)


@dataclass
class EnsembleConfig:
    """Fusion groups of checkpoints plus thresholding and voting rules.

    The threshold applies in logit space to each group's summed logits
    (0 corresponds to probability 0.5 for a single member). The default
    grouping puts each model in its own group: threshold every model's
    logits, then vote.
    """

    groups: list = field(default_factory=list)  # list of lists of ckpt paths
    threshold: float = 0.0
    vote_rule: str = "majority"
    tie_break: str = "positive"
    patch_size: tuple = (96, 96, 96)
    overlap: float = 0.5

    def __post_init__(self):
        if self.vote_rule != "majority":
            raise ValueError("only majority voting is supported")
        if self.tie_break not in ("positive", "negative"):
            raise ValueError("tie_break must be 'positive' or 'negative'")
        if not self.groups or any(len(g) == 0 for g in self.groups):
            raise EmptyGroupError("ensemble needs >= 1 group, each with >= 1 member")
        if len(self.groups) % 2 == 0:
            warnings.warn(
                f"{len(self.groups)} fusion groups: even counts can tie; "
                f"tie_break={self.tie_break!r} will decide",
                stacklevel=2,
            )


def load_ensemble_config(path) -> EnsembleConfig:
    """Read a membership file: JSON {groups, threshold, tie_break, ...}."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    groups = [
        [str((path.parent / member).resolve()) for member in group]
        for group in payload["groups"]
    ]
    kwargs = {k: payload[k] for k in ("threshold", "tie_break", "overlap")
              if k in payload}
    if "patch_size" in payload:
        kwargs["patch_size"] = tuple(payload["patch_size"])
    return EnsembleConfig(groups=groups, **kwargs)


def fuse_group(logits_list, threshold: float = 0.0,
               spacing=(1.0, 1.0, 1.0)) -> RegionMaskSet:
    """Sum member logits per region channel and threshold the sum.

    Output is a raw mask set: nesting is not guaranteed until
    post-processing.
    """
    logits_list = list(logits_list)
    if not logits_list:
        raise EmptyGroupError("cannot fuse an empty group")
    shapes = {lv.shape for lv in logits_list}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"group members disagree on shape: {shapes}")
    cases = {lv.case_id for lv in logits_list}
    if len(cases) > 1:
        raise ShapeMismatchError(f"group members belong to different cases: {cases}")
    summed = np.sum([lv.data.astype(np.float64) for lv in logits_list], axis=0)
    on = summed > threshold
    return RegionMaskSet(et=on[0], tc=on[1], wt=on[2], spacing=spacing)


def majority_vote(group_masks, tie_break: str = "positive") -> RegionMaskSet:
    """Per-voxel, per-region vote: on iff strictly more than half agree.

    An exact half split (possible only with an even group count) falls
    to ``tie_break``.
    """
    group_masks = list(group_masks)
    if not group_masks:
        raise EmptyGroupError("majority vote needs at least one group mask")
    shapes = {m.shape for m in group_masks}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"vote inputs disagree on shape: {shapes}")
    n = len(group_masks)
    fused = {}
    for name in REGION_NAMES:
        votes = np.sum([m.region(name).astype(np.int32) for m in group_masks],
                       axis=0)
        on = 2 * votes > n
        if n % 2 == 0 and tie_break == "positive":
            on |= 2 * votes == n
        fused[name] = on
    return RegionMaskSet(spacing=group_masks[0].spacing, **fused)


def ensemble_predict(cfg: EnsembleConfig, vol: MultiModalVolume,
                     handles=None) -> RegionMaskSet:
    """Run every member, fuse within groups, vote across groups.

    ``handles`` optionally substitutes preloaded models (same nested
    structure as ``cfg.groups``); otherwise members load from their
    checkpoint paths.
    """
    if handles is None:
        handles = [[load_model_handle(p) for p in group] for group in cfg.groups]
    group_masks = []
    for group in handles:
        logits = [predict_logits(h, vol, cfg.patch_size, cfg.overlap)
                  for h in group]
        group_masks.append(fuse_group(logits, cfg.threshold, vol.spacing))
    return majority_vote(group_masks, cfg.tie_break)
