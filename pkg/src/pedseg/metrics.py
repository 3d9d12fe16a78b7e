"""Segmentation quality metrics: whole-volume and lesion-wise.

The lesion-wise scores evaluate each ground-truth connected component
separately: a predicted component is associated with a GT lesion when it
overlaps the GT lesion dilated by a small radius, every unmatched GT
lesion counts as a false negative, every unmatched predicted component
as a false positive. False positives and false negatives contribute a 0
to the lesion-wise Dice mean and a fixed 374 mm penalty to the
lesion-wise HD95 mean.

Empty-vs-empty conventions (they matter for comparability, see the
individual docstrings): Dice of two empty masks is 1.0, lesion-wise HD95
with no lesions on either side is 0.0, and a case-level HD95 with
exactly one empty mask is reported as the 374 penalty.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyCohortError, EmptyMaskError, ShapeMismatchError
from .validation import REGION_NAMES, check_binary_mask
from .volume import RegionMaskSet

HD95_PENALTY = 374.0

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connectivity_structure(connectivity: int):
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be one of {sorted(_STRUCTURES)}")
    return _STRUCTURES[connectivity]


def _check_pair(pred, gt):
    pred = check_binary_mask(pred, "pred")
    gt = check_binary_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    """Plain Dice overlap 2|P&G| / (|P|+|G|).

    Both masks empty scores 1.0 (a perfect prediction of "nothing");
    exactly one empty scores 0.0. No epsilon: evaluation is exact,
    unlike the training loss.
    """
    pred, gt = _check_pair(pred, gt)
    n_pred = int(pred.sum())
    n_gt = int(gt.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / (n_pred + n_gt)


def _surface_points(mask):
    """Boundary voxels: on-voxels with an off 6-neighbor (or at the edge)."""
    eroded = ndimage.binary_erosion(mask, structure=_STRUCTURES[6])
    return np.argwhere(mask & ~eroded)


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled symmetric surface distances, in mm.

    Distances run from each boundary voxel of one mask to the nearest
    boundary voxel of the other, both directions pooled into one
    multiset; the percentile uses linear interpolation. Raises
    EmptyMaskError when either mask is empty (callers apply penalties).
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("hd95 needs two nonempty masks")
    spacing = np.asarray(spacing, dtype=np.float64)
    p_surf = _surface_points(pred) * spacing
    g_surf = _surface_points(gt) * spacing
    d_pg = cKDTree(g_surf).query(p_surf, k=1)[0]
    d_gp = cKDTree(p_surf).query(g_surf, k=1)[0]
    pooled = np.concatenate([d_pg, d_gp])
    return float(np.percentile(pooled, 95))


def sensitivity_specificity(pred, gt):
    """Voxel-level (TP/(TP+FN), TN/(TN+FP)).

    An empty denominator (no positives for sensitivity, no negatives for
    specificity) scores 1.0: there was nothing to miss.
    """
    pred, gt = _check_pair(pred, gt)
    tp = int((pred & gt).sum())
    fn = int((~pred & gt).sum())
    tn = int((~pred & ~gt).sum())
    fp = int((pred & ~gt).sum())
    sens = tp / (tp + fn) if (tp + fn) else 1.0
    spec = tn / (tn + fp) if (tn + fp) else 1.0
    return sens, spec


@dataclass
class LesionMatching:
    """Component-level association between a prediction and ground truth.

    ``pairs`` maps each matched GT lesion to the union of predicted
    components associated with it; every component belongs to at most
    one pair. ``fp_components`` / ``fn_components`` hold the unmatched
    masks.
    """

    pairs: list = field(default_factory=list)  # (gt_mask, pred_mask) tuples
    fp_components: list = field(default_factory=list)
    fn_components: list = field(default_factory=list)

    @property
    def counts(self):
        return {
            "matched": len(self.pairs),
            "fp": len(self.fp_components),
            "fn": len(self.fn_components),
        }


def match_lesions(pred, gt, connectivity: int = 26,
                  dilation_radius: int = 1) -> LesionMatching:
    """Associate predicted components with ground-truth lesions.

    A predicted component matches a GT lesion when it overlaps that
    lesion dilated by ``dilation_radius`` (same neighborhood as the
    component labeling). A predicted component overlapping several
    dilated GT lesions is assigned to the one it overlaps most, so each
    component appears in at most one pair; all predictions assigned to
    one GT lesion merge into a single pair for scoring.
    """
    pred, gt = _check_pair(pred, gt)
    structure = connectivity_structure(connectivity)
    gt_labels, n_gt = ndimage.label(gt, structure=structure)
    pred_labels, n_pred = ndimage.label(pred, structure=structure)

    # overlap voxel counts between each pred component and each dilated GT lesion
    overlap = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
    for gt_id in range(1, n_gt + 1):
        lesion = gt_labels == gt_id
        if dilation_radius > 0:
            lesion = ndimage.binary_dilation(lesion, structure=structure,
                                             iterations=dilation_radius)
        ids, counts = np.unique(pred_labels[lesion], return_counts=True)
        for pid, count in zip(ids, counts):
            if pid > 0:
                overlap[pid, gt_id] = count

    assigned = {}  # pred id -> gt id (largest overlap wins, then lowest gt id)
    for pid in range(1, n_pred + 1):
        row = overlap[pid]
        if row.max() > 0:
            assigned[pid] = int(row.argmax())

    pairs = []
    fn_components = []
    for gt_id in range(1, n_gt + 1):
        members = [pid for pid, g in assigned.items() if g == gt_id]
        gt_mask = gt_labels == gt_id
        if members:
            pred_mask = np.isin(pred_labels, members)
            pairs.append((gt_mask, pred_mask))
        else:
            fn_components.append(gt_mask)

    fp_components = [
        pred_labels == pid for pid in range(1, n_pred + 1) if pid not in assigned
    ]
    return LesionMatching(pairs=pairs, fp_components=fp_components,
                          fn_components=fn_components)


def lesion_wise_dice(matching: LesionMatching) -> float:
    """Mean of per-lesion Dice values with a 0 for every FP and FN.

    No lesions on either side means a perfect empty prediction: 1.0.
    """
    scores = [dice_score(p, g) for g, p in matching.pairs]
    scores += [0.0] * (len(matching.fp_components) + len(matching.fn_components))
    if not scores:
        return 1.0
    return float(np.mean(scores))


def lesion_wise_hd95(matching: LesionMatching, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean of per-lesion HD95 values with the 374 penalty per FP and FN.

    No lesions on either side scores 0.0.
    """
    scores = [hd95(p, g, spacing) for g, p in matching.pairs]
    scores += [HD95_PENALTY] * (len(matching.fp_components)
                                + len(matching.fn_components))
    if not scores:
        return 0.0
    return float(np.mean(scores))


@dataclass
class RegionScores:
    lw_dice: float
    dice: float
    lw_hd95: float
    hd95: float
    sensitivity: float
    specificity: float
    lesions: dict

    def as_dict(self):
        return {
            "lw_dice": self.lw_dice,
            "dice": self.dice,
            "lw_hd95": self.lw_hd95,
            "hd95": self.hd95,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "lesions": dict(self.lesions),
        }


@dataclass
class CaseReport:
    case_id: str
    regions: dict  # region name -> RegionScores

    def as_dict(self):
        return {
            "case_id": self.case_id,
            "regions": {k: v.as_dict() for k, v in self.regions.items()},
        }


def _case_hd95(pred, gt, spacing) -> float:
    """Case-level plain HD95 with penalty conventions for empty masks."""
    p_any, g_any = bool(pred.any()), bool(gt.any())
    if not p_any and not g_any:
        return 0.0
    if not p_any or not g_any:
        return HD95_PENALTY
    return hd95(pred, gt, spacing)


def evaluate_case(pred: RegionMaskSet, gt: RegionMaskSet, case_id: str = "",
                  connectivity: int = 26, dilation_radius: int = 1) -> CaseReport:
    """Score one case: all six metrics for each of the three regions."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    regions = {}
    for name in REGION_NAMES:
        p = pred.region(name)
        g = gt.region(name)
        matching = match_lesions(p, g, connectivity, dilation_radius)
        sens, spec = sensitivity_specificity(p, g)
        regions[name] = RegionScores(
            lw_dice=lesion_wise_dice(matching),
            dice=dice_score(p, g),
            lw_hd95=lesion_wise_hd95(matching, gt.spacing),
            hd95=_case_hd95(p, g, gt.spacing),
            sensitivity=sens,
            specificity=spec,
            lesions=matching.counts,
        )
    return CaseReport(case_id=case_id, regions=regions)


METRIC_COLUMNS = ("lw_dice", "dice", "lw_hd95", "hd95", "sensitivity", "specificity")


def evaluate_cohort(cases, connectivity: int = 26, dilation_radius: int = 1):
    """Evaluate (pred, gt[, case_id]) tuples; returns (reports, aggregate).

    The aggregate holds, per region, the arithmetic mean of each metric
    across cases.
    """
    cases = list(cases)
    if not cases:
        raise EmptyCohortError("cohort evaluation needs at least one case")
    reports = []
    for i, case in enumerate(cases):
        pred, gt = case[0], case[1]
        case_id = case[2] if len(case) > 2 else f"case_{i:03d}"
        reports.append(evaluate_case(pred, gt, case_id, connectivity,
                                     dilation_radius))
    aggregate = {"n_cases": len(reports), "case_ids": [r.case_id for r in reports],
                 "regions": {}}
    for name in REGION_NAMES:
        aggregate["regions"][name] = {
            metric: float(np.mean([getattr(r.regions[name], metric)
                                   for r in reports]))
            for metric in METRIC_COLUMNS
        }
    return reports, aggregate


def write_report_csv(path, reports):
    """One row per (case, region) with the six metric columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("case_id", "region", *METRIC_COLUMNS))
        for report in reports:
            for name in REGION_NAMES:
                scores = report.regions[name]
                writer.writerow((
                    report.case_id, name,
                    *(f"{getattr(scores, m):.6f}" for m in METRIC_COLUMNS),
                ))


def write_aggregate_json(path, aggregate):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
