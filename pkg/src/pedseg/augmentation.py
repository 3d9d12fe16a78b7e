"""Physics-inspired stochastic transforms applied jointly to image and label.

Six techniques: flip, affine, elastic deformation, additive noise,
intensity rescaling, and a smooth multiplicative bias field. A policy
draws them either individually ("singles", each with its own
application probability) or as an ordered chain ("composite"). Sampling
is fully deterministic given the policy seed and the case ordinal.

Conventions: spatial transforms act identically on the image and label
grids (trilinear interpolation for intensities, nearest-neighbor for
labels, out-of-domain voxels filled with background 0); intensity
transforms never touch labels and preserve exact-zero background voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import ndimage

from .errors import MisalignedPairError
from .validation import check_probability, check_range
from .volume import LabelMap, MultiModalVolume

TRANSFORM_KINDS = (
    "flip",
    "affine",
    "elastic_deformation",
    "noise",
    "rescale_intensity",
    "random_bias_field",
)


# ---------------------------------------------------------------------------
# Parameter ranges (what a policy owns)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlipParams:
    kind: str = "flip"
    axis_probabilities: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        for p in self.axis_probabilities:
            check_probability(p, "flip axis probability")


@dataclass(frozen=True)
class AffineParams:
    kind: str = "affine"
    rotation_degrees: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    translation_mm: float = 5.0

    def __post_init__(self):
        check_range(*self.scale_range, "scale")
        if self.rotation_degrees < 0 or self.translation_mm < 0:
            raise ValueError("rotation and translation bounds must be nonnegative")


@dataclass(frozen=True)
class ElasticParams:
    kind: str = "elastic_deformation"
    grid_points: int = 7
    max_displacement_mm: float = 7.5

    def __post_init__(self):
        if self.grid_points < 2:
            raise ValueError("elastic control grid needs at least 2 points per axis")
        if self.max_displacement_mm < 0:
            raise ValueError("max displacement must be nonnegative")


@dataclass(frozen=True)
class NoiseParams:
    kind: str = "noise"
    std_fraction_range: tuple = (0.0, 0.1)  # of the in-brain channel std

    def __post_init__(self):
        lo, hi = check_range(*self.std_fraction_range, "noise std fraction")
        if lo < 0:
            raise ValueError("noise std fraction must be nonnegative")


@dataclass(frozen=True)
class RescaleParams:
    kind: str = "rescale_intensity"
    out_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        check_range(*self.out_range, "rescale output")


@dataclass(frozen=True)
class BiasFieldParams:
    kind: str = "random_bias_field"
    order: int = 3
    coefficient_range: tuple = (-0.5, 0.5)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("bias field order must be >= 1")
        check_range(*self.coefficient_range, "bias coefficient")


PARAM_TYPES = {
    "flip": FlipParams,
    "affine": AffineParams,
    "elastic_deformation": ElasticParams,
    "noise": NoiseParams,
    "rescale_intensity": RescaleParams,
    "random_bias_field": BiasFieldParams,
}


def params_from_dict(spec: dict):
    """Build a params object from a config block with a ``kind`` key."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in PARAM_TYPES:
        raise ValueError(f"unknown transform kind {kind!r}; expected {TRANSFORM_KINDS}")
    for key in ("axis_probabilities", "scale_range", "std_fraction_range",
                "out_range", "coefficient_range"):
        if key in spec and isinstance(spec[key], list):
            spec[key] = tuple(spec[key])
    return PARAM_TYPES[kind](**spec)


# ---------------------------------------------------------------------------
# Concrete transforms (fixed parameters, deterministic apply)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlipTransform:
    axes: tuple  # three bools

    spatial = True

    def apply(self, image, labels, spacing):
        flip_axes = [i for i, on in enumerate(self.axes) if on]
        if not flip_axes:
            return image, labels
        image = np.flip(image, axis=[a + 1 for a in flip_axes]).copy()
        if labels is not None:
            labels = np.flip(labels, axis=flip_axes).copy()
        return image, labels


def _rotation_matrix(degrees):
    rx, ry, rz = np.deg2rad(degrees)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


@dataclass(frozen=True)
class AffineTransform:
    """Rotation (degrees, about the grid center, in physical mm space),
    per-axis scaling, and translation in mm."""

    rotation_degrees: tuple
    scale: tuple
    translation_mm: tuple

    spatial = True

    def voxel_matrix(self, spacing):
        """Forward voxel-space map p_out = M (p_in - c) + c + t_vox."""
        spacing = np.asarray(spacing, dtype=np.float64)
        rot = _rotation_matrix(self.rotation_degrees)
        mm_to_vox = np.diag(1.0 / spacing)
        vox_to_mm = np.diag(spacing)
        matrix = mm_to_vox @ rot @ vox_to_mm @ np.diag(self.scale)
        t_vox = np.asarray(self.translation_mm) / spacing
        return matrix, t_vox

    def apply(self, image, labels, spacing):
        matrix, t_vox = self.voxel_matrix(spacing)
        center = (np.asarray(image.shape[1:], dtype=np.float64) - 1.0) / 2.0
        inverse = np.linalg.inv(matrix)
        # scipy maps output coords to input coords: p_in = A p_out + offset
        offset = center - inverse @ (center + t_vox)
        out_image = np.stack([
            ndimage.affine_transform(ch, inverse, offset=offset, order=1,
                                     mode="constant", cval=0.0)
            for ch in image
        ])
        out_labels = labels
        if labels is not None:
            out_labels = ndimage.affine_transform(labels, inverse, offset=offset,
                                                  order=0, mode="constant", cval=0)
        return out_image.astype(image.dtype, copy=False), out_labels


@dataclass(frozen=True)
class ElasticTransform:
    """Dense deformation interpolated from a coarse random control grid."""

    displacement_mm: np.ndarray  # (3, g, g, g)

    spatial = True

    def _dense_displacement(self, shape, spacing):
        grids = []
        g = self.displacement_mm.shape[1]
        coords = np.indices(shape, dtype=np.float64)
        ctrl_coords = [
            coords[d] * (g - 1) / max(shape[d] - 1, 1) for d in range(3)
        ]
        for d in range(3):
            dense_mm = ndimage.map_coordinates(
                self.displacement_mm[d], ctrl_coords, order=3, mode="nearest"
            )
            grids.append(dense_mm / spacing[d])
        return np.stack(grids)

    def apply(self, image, labels, spacing):
        shape = image.shape[1:]
        disp = self._dense_displacement(shape, np.asarray(spacing, dtype=np.float64))
        coords = np.indices(shape, dtype=np.float64) + disp
        out_image = np.stack([
            ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0)
            for ch in image
        ])
        out_labels = labels
        if labels is not None:
            out_labels = ndimage.map_coordinates(labels, coords, order=0,
                                                 mode="constant", cval=0)
        return out_image.astype(image.dtype, copy=False), out_labels


@dataclass(frozen=True)
class NoiseTransform:
    """Additive Gaussian noise on brain voxels, scaled to each channel's std."""

    std_fraction: float
    seed: int

    spatial = False

    def apply(self, image, labels, spacing):
        rng = np.random.default_rng(self.seed)
        out = image.copy()
        for c in range(image.shape[0]):
            mask = image[c] != 0
            if not mask.any():
                continue
            sigma = self.std_fraction * float(image[c][mask].std())
            if sigma == 0:
                continue
            noise = rng.normal(0.0, sigma, size=int(mask.sum()))
            out[c][mask] = image[c][mask] + noise.astype(image.dtype)
        return out, labels


@dataclass(frozen=True)
class RescaleTransform:
    """Linearly map each channel's brain-voxel intensities into a range."""

    out_min: float
    out_max: float

    spatial = False

    def apply(self, image, labels, spacing):
        out = image.copy()
        for c in range(image.shape[0]):
            mask = image[c] != 0
            if not mask.any():
                continue
            values = image[c][mask].astype(np.float64)
            lo, hi = values.min(), values.max()
            if hi > lo:
                scaled = (values - lo) / (hi - lo)
                scaled = scaled * (self.out_max - self.out_min) + self.out_min
            else:
                scaled = np.full_like(values, (self.out_min + self.out_max) / 2.0)
            out[c][mask] = scaled.astype(image.dtype)
        return out, labels


def bias_field(shape, coefficients, order):
    """Strictly positive multiplicative field exp(P(x, y, z)).

    P is a polynomial over coordinates normalized to [-1, 1], with one
    coefficient per monomial of total degree 1..order.
    """
    axes = [np.linspace(-1.0, 1.0, s) if s > 1 else np.zeros(1) for s in shape]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(shape, dtype=np.float64)
    idx = 0
    for i, j, k in monomial_exponents(order):
        poly += coefficients[idx] * xs**i * ys**j * zs**k
        idx += 1
    return np.exp(poly)


def monomial_exponents(order):
    """Exponent triples with total degree in 1..order, in a fixed order."""
    return [
        (i, j, k)
        for i, j, k in product(range(order + 1), repeat=3)
        if 0 < i + j + k <= order
    ]


@dataclass(frozen=True)
class BiasFieldTransform:
    coefficients: np.ndarray
    order: int

    spatial = False

    def field(self, shape):
        return bias_field(shape, self.coefficients, self.order)

    def apply(self, image, labels, spacing):
        field_values = self.field(image.shape[1:]).astype(np.float64)
        out = (image.astype(np.float64) * field_values[None]).astype(image.dtype)
        return out, labels


@dataclass(frozen=True)
class ComposedTransform:
    """An ordered chain of concrete transforms; empty chain is the identity."""

    steps: tuple = ()

    @property
    def is_identity(self):
        return len(self.steps) == 0

    def apply(self, image, labels, spacing):
        for step in self.steps:
            image, labels = step.apply(image, labels, spacing)
        return image, labels


# ---------------------------------------------------------------------------
# Policy: sampling concrete transforms from parameter ranges
# ---------------------------------------------------------------------------


def draw_concrete(params, rng):
    """Fix one transform's free parameters using the given random stream."""
    if isinstance(params, FlipParams):
        axes = tuple(bool(rng.random() < p) for p in params.axis_probabilities)
        return FlipTransform(axes=axes)
    if isinstance(params, AffineParams):
        r = params.rotation_degrees
        lo, hi = params.scale_range
        t = params.translation_mm
        return AffineTransform(
            rotation_degrees=tuple(rng.uniform(-r, r, 3)),
            scale=tuple(rng.uniform(lo, hi, 3)),
            translation_mm=tuple(rng.uniform(-t, t, 3)),
        )
    if isinstance(params, ElasticParams):
        g = params.grid_points
        d = params.max_displacement_mm
        return ElasticTransform(displacement_mm=rng.uniform(-d, d, size=(3, g, g, g)))
    if isinstance(params, NoiseParams):
        lo, hi = params.std_fraction_range
        return NoiseTransform(
            std_fraction=float(rng.uniform(lo, hi)),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
    if isinstance(params, RescaleParams):
        return RescaleTransform(out_min=params.out_range[0], out_max=params.out_range[1])
    if isinstance(params, BiasFieldParams):
        lo, hi = params.coefficient_range
        n = len(monomial_exponents(params.order))
        return BiasFieldTransform(
            coefficients=rng.uniform(lo, hi, size=n), order=params.order
        )
    raise TypeError(f"unknown transform params {type(params).__name__}")


@dataclass
class AugmentationPolicy:
    """Which transforms may fire, with what probabilities, from what seed."""

    singles: list = field(default_factory=list)  # (params, probability) pairs
    composite: list = field(default_factory=list)  # ordered params chain
    composite_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for _, prob in self.singles:
            check_probability(prob, "single transform probability")
        check_probability(self.composite_probability, "composite probability")

    def rng_for(self, ordinal: int) -> np.random.Generator:
        """Independent, deterministically derived stream per case ordinal."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, ordinal]))


def default_policy(seed: int = 0) -> AugmentationPolicy:
    """All six techniques as singles with moderate probabilities."""
    return AugmentationPolicy(
        singles=[
            (FlipParams(), 0.5),
            (AffineParams(), 0.3),
            (ElasticParams(), 0.2),
            (NoiseParams(), 0.3),
            (RescaleParams(), 0.0),
            (BiasFieldParams(), 0.2),
        ],
        composite=[FlipParams(), AffineParams(), NoiseParams()],
        composite_probability=0.0,
        seed=seed,
    )


def sample_transform(policy: AugmentationPolicy, rng) -> ComposedTransform:
    """Draw a fully determined transform chain from the policy."""
    steps = []
    for params, prob in policy.singles:
        if rng.random() < prob:
            steps.append(draw_concrete(params, rng))
    if policy.composite and rng.random() < policy.composite_probability:
        steps.extend(draw_concrete(p, rng) for p in policy.composite)
    return ComposedTransform(steps=tuple(steps))


def apply_transform(transform, vol: MultiModalVolume, labels: LabelMap):
    """Apply a concrete transform jointly to a volume and its label map."""
    if tuple(vol.data.shape[1:]) != tuple(labels.data.shape):
        raise MisalignedPairError(
            f"image {vol.data.shape[1:]} and labels {labels.data.shape} differ"
        )
    image, label_data = transform.apply(vol.data, labels.data, vol.spacing)
    out_vol = MultiModalVolume(
        data=image, spacing=vol.spacing, affine=vol.affine, case_id=vol.case_id
    )
    out_labels = LabelMap(
        data=np.ascontiguousarray(label_data),
        label_vocabulary=labels.label_vocabulary,
        case_id=labels.case_id,
    )
    return out_vol, out_labels


def augment_batch(policy: AugmentationPolicy, cases):
    """Independently augment each (volume, labels) case.

    Cases whose draw comes out empty pass through unchanged.
    """
    out = []
    for ordinal, (vol, labels) in enumerate(cases):
        transform = sample_transform(policy, policy.rng_for(ordinal))
        if transform.is_identity:
            out.append((vol, labels))
        else:
            out.append(apply_transform(transform, vol, labels))
    return out
