"""Refinement of raw ensemble masks.

Three techniques per case: hierarchy enforcement (upward closure so ET
stays inside TC inside WT; never removes a voxel from a smaller
region), morphological boundary smoothing (closing then opening with a
box element), and connected-component size filtering (drops isolated
specks below a voxel- or mm3-volume threshold).

``postprocess_case`` runs them as enforce -> smooth -> filter ->
enforce. That order makes the full pipeline provably idempotent for
region-uniform thresholds: the close-open filter is idempotent and
increasing (so it preserves nesting), its output is a union of
structuring-element translates, any union of whole connected components
of such a fixed point is again a fixed point, and with equal per-region
thresholds the size filter cannot break nesting (a surviving inner
component forces its enclosing component to survive). Running the size
filter before smoothing instead would let the opening shrink a kept
component below threshold, and enforcing last would let a second pass
bridge unions across regions; either breaks idempotence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import connectivity_structure
from .validation import REGION_NAMES, check_binary_mask
from .volume import RegionMaskSet

SMOOTHING_MODES = ("none", "closing_then_opening")


@dataclass(frozen=True)
class PostprocConfig:
    """Size-filter thresholds, connectivity, smoothing, hierarchy toggle.

    ``min_component_size`` is a single number or a per-region mapping;
    it is read in voxels unless ``size_units`` is ``mm3``, in which case
    it converts through the voxel volume of each mask's spacing.
    """

    min_component_size: object = 50
    size_units: str = "voxels"
    connectivity: int = 26
    smoothing: str = "closing_then_opening"
    smoothing_radius: int = 1
    enforce_hierarchy: bool = True

    def __post_init__(self):
        if self.size_units not in ("voxels", "mm3"):
            raise ValueError("size_units must be 'voxels' or 'mm3'")
        if self.smoothing not in SMOOTHING_MODES:
            raise ValueError(f"smoothing must be one of {SMOOTHING_MODES}")
        if self.smoothing != "none" and self.smoothing_radius < 1:
            raise ValueError("smoothing radius must be >= 1")
        connectivity_structure(self.connectivity)
        for value in self._threshold_map().values():
            if value < 0:
                raise ValueError("min_component_size must be nonnegative")

    def _threshold_map(self) -> dict:
        if isinstance(self.min_component_size, dict):
            out = {name: float(self.min_component_size.get(name, 0))
                   for name in REGION_NAMES}
        else:
            out = {name: float(self.min_component_size) for name in REGION_NAMES}
        return out

    def threshold_voxels(self, region: str, spacing=(1.0, 1.0, 1.0)) -> int:
        value = self._threshold_map()[region]
        if self.size_units == "mm3":
            voxel_volume = float(np.prod(np.asarray(spacing, dtype=np.float64)))
            return int(math.ceil(value / voxel_volume))
        return int(value)


def ball_element(radius: int) -> np.ndarray:
    """Chebyshev ball (solid (2r+1)^3 box) of the given voxel radius.

    The box metric matches the 26-connectivity convention and makes
    axis-aligned solids exact fixed points of the close-open filter.
    """
    r = int(radius)
    return np.ones((2 * r + 1,) * 3, dtype=bool)


def size_filter(mask, min_voxels: int, connectivity: int = 26) -> np.ndarray:
    """Drop every connected component smaller than ``min_voxels``."""
    mask = check_binary_mask(mask)
    if min_voxels <= 0 or not mask.any():
        return mask.copy()
    structure = connectivity_structure(connectivity)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask.copy()
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    keep = counts >= min_voxels
    keep[0] = False
    return keep[labels]


def smooth_boundaries(mask, radius: int = 1) -> np.ndarray:
    """Morphological closing then opening with a ball element.

    Computed on a zero-padded copy so the result matches the
    infinite-background definition even for masks touching the grid
    edge. The close-open filter is idempotent.
    """
    mask = check_binary_mask(mask)
    if not mask.any():
        return mask.copy()
    element = ball_element(radius)
    pad = 2 * radius
    padded = np.pad(mask, pad)
    closed = ndimage.binary_closing(padded, structure=element)
    opened = ndimage.binary_opening(closed, structure=element)
    core = opened[pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(core)


def enforce_hierarchy(raw: RegionMaskSet) -> RegionMaskSet:
    """Restore nesting by upward closure: grow TC and WT, never shrink ET.

    WT := WT | TC | ET and TC := TC | ET, so every detected voxel of a
    smaller region survives into its enclosing regions.
    """
    tc = raw.tc | raw.et
    wt = raw.wt | tc
    return RegionMaskSet(et=raw.et.copy(), tc=tc, wt=wt, spacing=raw.spacing)


def postprocess_case(raw: RegionMaskSet, cfg: PostprocConfig | None = None) -> RegionMaskSet:
    """Full refinement: enforce, smooth, size-filter, enforce again.

    The trailing closure only matters for per-region (unequal)
    thresholds, where filtering may reopen a nesting hole; with uniform
    thresholds it is a no-op and the whole pipeline is idempotent.
    """
    if cfg is None:
        cfg = PostprocConfig()
    current = enforce_hierarchy(raw) if cfg.enforce_hierarchy else raw
    regions = {}
    for name in REGION_NAMES:
        mask = current.region(name)
        if cfg.smoothing == "closing_then_opening":
            mask = smooth_boundaries(mask, cfg.smoothing_radius)
        mask = size_filter(mask, cfg.threshold_voxels(name, raw.spacing),
                           cfg.connectivity)
        regions[name] = mask
    out = RegionMaskSet(spacing=raw.spacing, **regions)
    if cfg.enforce_hierarchy:
        out = enforce_hierarchy(out)
    return out
