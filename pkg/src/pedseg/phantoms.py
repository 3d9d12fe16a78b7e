"""Synthetic multi-modal phantoms with nested tumor regions.

Phantoms are deterministic given a seed: an ellipsoidal "brain" with
per-modality base intensities and smooth spatial variation, plus three
nested tumor shells (enhancing core inside tumor core inside whole
tumor) with modality-dependent contrast. They exercise every pipeline
stage at desk scale without any real data.

Run ``python -m pedseg.phantoms OUTDIR --cases 3`` to materialize a
ready-to-use dataset with a manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .validation import MODALITY_NAMES
from .volume import (
    DEFAULT_REGION_MAPPING,
    LabelMap,
    MultiModalVolume,
    save_label_map,
    save_volume,
)

# Base intensity and per-region contrast for each modality. Values are
# arbitrary but distinct so each region is separable from some channel.
_MODALITY_BASE = {"t1": 80.0, "t1gd": 90.0, "t2": 70.0, "flair": 60.0}
_REGION_CONTRAST = {
    # (edema_delta, core_delta, enhancing_delta)
    "t1": (-10.0, -25.0, +10.0),
    "t1gd": (-5.0, -15.0, +45.0),
    "t2": (+25.0, +10.0, -10.0),
    "flair": (+35.0, +15.0, +5.0),
}


def _ellipsoid(shape, center, radii):
    grids = np.indices(shape, dtype=np.float64)
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return acc <= 1.0


def make_phantom(case_id: str, shape=(32, 32, 32), seed: int = 0,
                 spacing=(1.0, 1.0, 1.0), noise_std: float = 2.0):
    """Build one synthetic case; returns (volume, labels)."""
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    center = np.asarray(shape, dtype=np.float64) / 2.0 - 0.5
    brain_radii = np.asarray(shape, dtype=np.float64) * 0.42
    brain = _ellipsoid(shape, center, brain_radii)

    # Tumor center jitters inside the brain; radii scale with volume size.
    offset = rng.uniform(-0.12, 0.12, size=3) * np.asarray(shape)
    tumor_center = center + offset
    wt_r = max(min(shape) * 0.20, 3.0)
    tc_r = wt_r * 0.65
    et_r = wt_r * 0.38
    wt = _ellipsoid(shape, tumor_center, (wt_r,) * 3) & brain
    tc = _ellipsoid(shape, tumor_center, (tc_r,) * 3) & brain
    et = _ellipsoid(shape, tumor_center, (et_r,) * 3) & brain

    labels = np.zeros(shape, dtype=np.int16)
    labels[wt] = 2   # edema shell
    labels[tc] = 1   # non-enhancing core shell
    labels[et] = 3   # enhancing tumor

    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    gradient = sum(np.meshgrid(*axes, indexing="ij")) / 3.0

    channels = []
    for name in MODALITY_NAMES:
        base = _MODALITY_BASE[name]
        edema_d, core_d, enh_d = _REGION_CONTRAST[name]
        channel = np.zeros(shape, dtype=np.float64)
        channel[brain] = base * (1.0 + 0.08 * gradient[brain])
        channel[labels == 2] += edema_d
        channel[labels == 1] += core_d
        channel[labels == 3] += enh_d
        channel[brain] += rng.normal(0.0, noise_std, size=int(brain.sum()))
        # keep brain voxels strictly positive so 0 stays a pure background tag
        channel[brain] = np.maximum(channel[brain], 1.0)
        channels.append(channel.astype(np.float32))

    vol = MultiModalVolume(
        data=np.stack(channels), spacing=spacing, affine=np.diag((*spacing, 1.0)),
        case_id=case_id,
    )
    lm = LabelMap(data=labels, label_vocabulary=DEFAULT_REGION_MAPPING.vocabulary,
                  case_id=case_id)
    return vol, lm


def write_phantom_dataset(directory, n_cases: int = 3, shape=(32, 32, 32),
                          seed: int = 0, splits=None) -> Path:
    """Write phantoms + labels as NIfTI files and a JSON manifest.

    Returns the manifest path. ``splits`` optionally assigns one split
    tag per case (defaults to all "train").
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_cases):
        case_id = f"phantom_{i:03d}"
        vol, lm = make_phantom(case_id, shape=shape, seed=seed + i)
        save_volume(directory, vol)
        label_path = directory / f"{case_id}_seg.nii.gz"
        save_label_map(label_path, lm, affine=vol.affine, spacing=vol.spacing)
        records.append({
            "case_id": case_id,
            **{m: f"{case_id}_{m}.nii.gz" for m in MODALITY_NAMES},
            "label": f"{case_id}_seg.nii.gz",
            "split": splits[i] if splits else "train",
        })
    manifest_path = directory / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
    return manifest_path


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="Generate a synthetic phantom dataset")
    parser.add_argument("outdir")
    parser.add_argument("--cases", type=int, default=3)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    manifest = write_phantom_dataset(
        args.outdir, n_cases=args.cases, shape=(args.size,) * 3, seed=args.seed
    )
    print(manifest)


if __name__ == "__main__":
    main()
