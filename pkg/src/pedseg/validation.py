"""Input validation helpers shared across the pipeline.

Small ``check_*`` functions in the spirit of scikit-learn's validation
utilities: each either returns a normalized value or raises a typed error.
"""

from __future__ import annotations

import numpy as np

from .errors import MisalignedPairError, ShapeMismatchError

N_MODALITIES = 4
N_REGIONS = 3
REGION_NAMES = ("et", "tc", "wt")
MODALITY_NAMES = ("t1", "t1gd", "t2", "flair")


def check_volume_array(data) -> np.ndarray:
    """Validate a (4, X, Y, Z) multi-modal intensity grid."""
    data = np.asarray(data)
    if data.ndim != 4:
        raise ShapeMismatchError(
            f"volume data must be 4D (channel, x, y, z), got shape {data.shape}"
        )
    if data.shape[0] != N_MODALITIES:
        raise ShapeMismatchError(
            f"volume must have exactly {N_MODALITIES} channels, got {data.shape[0]}"
        )
    return data


def check_label_array(data) -> np.ndarray:
    """Validate a 3D integer label grid."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ShapeMismatchError(f"label map must be 3D, got shape {data.shape}")
    if not np.issubdtype(data.dtype, np.integer):
        raise ShapeMismatchError(f"label map must be integer-typed, got {data.dtype}")
    return data


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Validate a 3D binary grid; returns a bool array."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeMismatchError(f"{name} must be 3D, got shape {mask.shape}")
    if mask.dtype != bool:
        values = np.unique(mask)
        if not np.isin(values, (0, 1)).all():
            raise ShapeMismatchError(f"{name} must be binary, found values {values[:8]}")
        mask = mask.astype(bool)
    return mask


def check_same_shape(*arrays, names=None):
    """Raise ShapeMismatchError unless all arrays share one shape."""
    shapes = [np.asarray(a).shape for a in arrays]
    if len(set(shapes)) > 1:
        label = "" if names is None else f" ({', '.join(names)})"
        raise ShapeMismatchError(f"shapes differ{label}: {shapes}")


def check_spacing(spacing) -> np.ndarray:
    """Validate strictly positive per-axis voxel sizes."""
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,):
        raise ShapeMismatchError(f"spacing must have 3 components, got {spacing.shape}")
    if not (spacing > 0).all():
        raise ValueError(f"spacing components must be strictly positive: {spacing}")
    return spacing


def check_aligned_pair(volume, labels):
    """Require an image volume and a label map to share spatial dims."""
    if tuple(volume.data.shape[1:]) != tuple(labels.data.shape):
        raise MisalignedPairError(
            f"image {volume.data.shape[1:]} and labels {labels.data.shape} "
            f"are not spatially aligned"
        )


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def check_range(lo, hi, name: str):
    if lo > hi:
        raise ValueError(f"{name} range is degenerate: ({lo}, {hi})")
    return float(lo), float(hi)
