"""Volumetric brain-tumor segmentation pipeline.

Configurable UNet3D/ONet3D variants trained with hybrid Dice objectives,
fused by logit summation and per-voxel majority voting, refined with
morphological post-processing, and scored with lesion-wise metrics.
"""

from .augmentation import (
    AffineParams,
    AugmentationPolicy,
    BiasFieldParams,
    ElasticParams,
    FlipParams,
    NoiseParams,
    RescaleParams,
    apply_transform,
    augment_batch,
    default_policy,
    sample_transform,
)
from .estimators import MaskPostProcessor, SegmentationEnsemble, TumorSegmenter
from .inference import (
    EnsembleConfig,
    LogitsVolume,
    ensemble_predict,
    fuse_group,
    majority_vote,
    predict_logits,
)
from .losses import (
    LossConfig,
    bce,
    combined_bce_dice,
    combined_bce_gdl,
    combined_loss,
    dice_loss,
    gdl,
)
from .metrics import (
    CaseReport,
    LesionMatching,
    dice_score,
    evaluate_case,
    evaluate_cohort,
    hd95,
    lesion_wise_dice,
    lesion_wise_hd95,
    match_lesions,
    sensitivity_specificity,
)
from .models import (
    ArchitectureSpec,
    ModelHandle,
    VARIANT_NAMES,
    build_model,
    forward,
    spec_for_variant,
)
from .postprocess import (
    PostprocConfig,
    enforce_hierarchy,
    postprocess_case,
    size_filter,
    smooth_boundaries,
)
from .training import OptimizerConfig, TrainConfig, fit_model, train, validate
from .volume import (
    DEFAULT_REGION_MAPPING,
    DatasetManifest,
    LabelMap,
    MultiModalVolume,
    RegionMapping,
    RegionMaskSet,
    labels_to_regions,
    load_manifest,
    load_volume,
    normalize_intensities,
    regions_to_labels,
)

__version__ = "0.1.0"

__all__ = [
    "AffineParams", "ArchitectureSpec", "AugmentationPolicy", "BiasFieldParams",
    "CaseReport", "DEFAULT_REGION_MAPPING", "DatasetManifest", "ElasticParams",
    "EnsembleConfig", "FlipParams", "LabelMap", "LesionMatching", "LogitsVolume",
    "LossConfig", "MaskPostProcessor", "ModelHandle", "MultiModalVolume",
    "NoiseParams", "OptimizerConfig", "PostprocConfig", "RegionMapping",
    "RegionMaskSet", "RescaleParams", "SegmentationEnsemble", "TrainConfig",
    "TumorSegmenter", "VARIANT_NAMES", "apply_transform", "augment_batch", "bce",
    "build_model", "combined_bce_dice", "combined_bce_gdl", "combined_loss",
    "default_policy", "dice_loss", "dice_score", "enforce_hierarchy",
    "ensemble_predict", "evaluate_case", "evaluate_cohort", "fit_model",
    "forward", "fuse_group", "gdl", "hd95", "labels_to_regions",
    "lesion_wise_dice", "lesion_wise_hd95", "load_manifest", "load_volume",
    "majority_vote", "match_lesions", "normalize_intensities",
    "postprocess_case", "predict_logits", "regions_to_labels",
    "sample_transform", "sensitivity_specificity", "size_filter",
    "smooth_boundaries", "spec_for_variant", "train", "validate",
]
