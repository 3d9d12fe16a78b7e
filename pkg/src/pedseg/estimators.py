"""Scikit-learn style estimators wrapping the pipeline stages.

These classes follow the sklearn conventions (constructor params stored
verbatim, ``get_params``/``set_params`` inherited from BaseEstimator,
``fit`` returns self) so the segmentation workflow composes with the
wider ecosystem: ``TumorSegmenter`` is the trainable fit/predict core,
``SegmentationEnsemble`` fuses fitted segmenters, and
``MaskPostProcessor`` is a stateless transformer over mask sets.

X is a list of MultiModalVolume, y a list of LabelMap (or RegionMaskSet
for scoring).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .inference import EnsembleConfig, ensemble_predict, fuse_group, predict_logits
from .losses import LossConfig
from .metrics import dice_score
from .postprocess import PostprocConfig, postprocess_case
from .training import OptimizerConfig, TrainConfig, fit_model, validate
from .validation import REGION_NAMES
from .volume import (
    DEFAULT_REGION_MAPPING,
    LabelMap,
    RegionMaskSet,
    labels_to_regions,
    normalize_intensities,
)


def _as_region_sets(y, mapping):
    out = []
    for target in y:
        if isinstance(target, RegionMaskSet):
            out.append(target)
        elif isinstance(target, LabelMap):
            out.append(labels_to_regions(target, mapping))
        else:
            raise TypeError(f"targets must be LabelMap or RegionMaskSet, "
                            f"got {type(target).__name__}")
    return out


class TumorSegmenter(BaseEstimator):
    """Trainable volumetric segmenter for one architecture variant.

    ``fit(X, y)`` trains the variant on (volume, label) pairs;
    ``predict(X)`` returns one raw RegionMaskSet per volume by
    thresholding sigmoid probabilities at ``threshold``. Volumes are
    z-score normalized internally unless ``normalize=False``.
    """

    def __init__(self, variant="unet3d", depth=4, base_channels=32,
                 loss_family="bce_dice", alpha=0.5, beta=0.5, epsilon=1e-6,
                 optimizer="adam", learning_rate=1e-4, weight_decay=1e-5,
                 batch_size=1, max_epochs=10, patch_size=(96, 96, 96),
                 validation_interval=1, early_stop_patience=0,
                 tumor_patch_fraction=0.5, threshold=0.5, augmentation=None,
                 normalize=True, overlap=0.5, seed=0):
        self.variant = variant
        self.depth = depth
        self.base_channels = base_channels
        self.loss_family = loss_family
        self.alpha = alpha
        self.beta = beta
        self.epsilon = epsilon
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patch_size = patch_size
        self.validation_interval = validation_interval
        self.early_stop_patience = early_stop_patience
        self.tumor_patch_fraction = tumor_patch_fraction
        self.threshold = threshold
        self.augmentation = augmentation
        self.normalize = normalize
        self.overlap = overlap
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.variant, depth=self.depth,
            base_channels=self.base_channels,
            loss=LossConfig(family=self.loss_family, alpha=self.alpha,
                            beta=self.beta, epsilon=self.epsilon),
            augmentation=self.augmentation,
            optimizer=OptimizerConfig(kind=self.optimizer,
                                      learning_rate=self.learning_rate,
                                      weight_decay=self.weight_decay),
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patch_size=tuple(self.patch_size),
            validation_interval=self.validation_interval,
            early_stop_patience=self.early_stop_patience,
            tumor_patch_fraction=self.tumor_patch_fraction,
            threshold=self.threshold, seed=self.seed,
        )

    def _prepare(self, X):
        return [normalize_intensities(v) if self.normalize else v for v in X]

    def fit(self, X, y, mapping=DEFAULT_REGION_MAPPING):
        volumes = self._prepare(X)
        targets = list(y)
        if len(volumes) != len(targets):
            raise ValueError("X and y must have the same length")
        cases = []
        for vol, target in zip(volumes, targets):
            if isinstance(target, RegionMaskSet):
                raise TypeError("fit expects LabelMap targets; convert masks "
                                "with regions_to_labels first")
            cases.append((vol, target))
        result = fit_model(self._train_config(), cases, mapping=mapping)
        self.handle_ = result.handle
        self.history_ = result.history
        self.best_scores_ = result.best_scores
        return self

    def _check_fitted(self):
        if not hasattr(self, "handle_"):
            raise NotFittedError("this TumorSegmenter is not fitted yet")

    def predict_logits(self, X):
        self._check_fitted()
        return [
            predict_logits(self.handle_, vol, tuple(self.patch_size), self.overlap)
            for vol in self._prepare(X)
        ]

    def predict(self, X):
        self._check_fitted()
        out = []
        for vol, logits in zip(X, self.predict_logits(X)):
            out.append(fuse_group([logits], threshold=0.0, spacing=vol.spacing))
        return out

    def score(self, X, y, mapping=DEFAULT_REGION_MAPPING):
        """Mean plain Dice over regions and cases."""
        self._check_fitted()
        gt = _as_region_sets(y, mapping)
        cases = list(zip(self._prepare(X), gt))
        scores = validate(self.handle_, cases, self.threshold,
                          tuple(self.patch_size), self.overlap)
        return float(np.mean(list(scores.values())))


class SegmentationEnsemble(BaseEstimator):
    """Logit-sum fusion groups plus per-voxel majority voting.

    ``members`` holds fitted TumorSegmenters, either flat (one group per
    member, the default reading) or as explicit groups (lists) whose
    logits are summed before thresholding.
    """

    def __init__(self, members=(), threshold=0.0, tie_break="positive",
                 patch_size=(96, 96, 96), overlap=0.5):
        self.members = members
        self.threshold = threshold
        self.tie_break = tie_break
        self.patch_size = patch_size
        self.overlap = overlap

    def _groups(self):
        groups = []
        for member in self.members:
            group = list(member) if isinstance(member, (list, tuple)) else [member]
            for segmenter in group:
                segmenter._check_fitted()
            groups.append([s.handle_ for s in group])
        return groups

    def fit(self, X=None, y=None):
        """Validates the members; fusion itself learns nothing."""
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        self._groups()
        return self

    def predict(self, X):
        handles = self._groups()
        cfg = EnsembleConfig(
            groups=[["<in-memory>"] * len(g) for g in handles],
            threshold=self.threshold, tie_break=self.tie_break,
            patch_size=tuple(self.patch_size), overlap=self.overlap,
        )
        return [
            ensemble_predict(cfg, normalize_intensities(vol), handles=handles)
            for vol in X
        ]


class MaskPostProcessor(BaseEstimator, TransformerMixin):
    """Stateless transformer applying the post-processing pipeline."""

    def __init__(self, min_component_size=50, size_units="voxels",
                 connectivity=26, smoothing="closing_then_opening",
                 smoothing_radius=1, enforce_hierarchy=True):
        self.min_component_size = min_component_size
        self.size_units = size_units
        self.connectivity = connectivity
        self.smoothing = smoothing
        self.smoothing_radius = smoothing_radius
        self.enforce_hierarchy = enforce_hierarchy

    def _config(self) -> PostprocConfig:
        return PostprocConfig(
            min_component_size=self.min_component_size,
            size_units=self.size_units, connectivity=self.connectivity,
            smoothing=self.smoothing, smoothing_radius=self.smoothing_radius,
            enforce_hierarchy=self.enforce_hierarchy,
        )

    def fit(self, X=None, y=None):
        self._config()  # validate parameters
        return self

    def transform(self, X):
        cfg = self._config()
        return [postprocess_case(mask_set, cfg) for mask_set in X]


def dice_report(predictions, references, mapping=DEFAULT_REGION_MAPPING):
    """Per-region mean Dice between two lists of mask sets or label maps."""
    preds = _as_region_sets(predictions, mapping)
    refs = _as_region_sets(references, mapping)
    out = {}
    for name in REGION_NAMES:
        out[name] = float(np.mean([
            dice_score(p.region(name), r.region(name))
            for p, r in zip(preds, refs)
        ]))
    return out
