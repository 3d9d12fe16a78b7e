"""Multi-modal volumes, label maps, region masks, and their file I/O.

The on-disk convention is one gzip-compressed NIfTI file per modality plus
one integer label file per case, listed in a JSON manifest. Region masks
(ET, TC, WT) are overlapping binary grids derived from the integer labels
through a configurable :class:`RegionMapping`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import (
    HeaderMismatchError,
    MissingFileError,
    NestingViolationError,
    ShapeMismatchError,
    UnknownLabelError,
)
from .validation import (
    MODALITY_NAMES,
    check_label_array,
    check_binary_mask,
    check_same_shape,
    check_spacing,
    check_volume_array,
)

HEADER_TOLERANCE = 1e-4


@dataclass
class MultiModalVolume:
    """A 4-channel intensity grid with spatial metadata.

    Channels are fixed in the order (T1, T1Gd, T2, FLAIR). All channels
    share one spatial grid; ``spacing`` is the per-axis voxel size in mm
    and ``affine`` the 4x4 voxel-to-world map.
    """

    data: np.ndarray
    spacing: np.ndarray
    affine: np.ndarray
    case_id: str = ""

    def __post_init__(self):
        self.data = check_volume_array(self.data)
        self.spacing = check_spacing(self.spacing)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ShapeMismatchError(f"affine must be 4x4, got {self.affine.shape}")

    @property
    def shape(self):
        """Spatial dimensions (X, Y, Z)."""
        return tuple(self.data.shape[1:])


@dataclass
class LabelMap:
    """A 3D integer annotation grid with a closed label vocabulary."""

    data: np.ndarray
    label_vocabulary: frozenset = frozenset({0, 1, 2, 3})
    case_id: str = ""

    def __post_init__(self):
        self.data = check_label_array(self.data)
        self.label_vocabulary = frozenset(int(v) for v in self.label_vocabulary)
        present = set(np.unique(self.data).tolist())
        unknown = present - self.label_vocabulary
        if unknown:
            raise UnknownLabelError(
                f"label map {self.case_id!r} contains labels outside the "
                f"vocabulary: {sorted(unknown)}"
            )

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class RegionMaskSet:
    """Binary masks for the three overlapping tumor regions.

    The evaluated regions nest: every ET voxel belongs to TC and every TC
    voxel to WT. Raw model output may violate this; post-processing
    restores it. Use ``check_nesting`` to assert the invariant.
    """

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.et = check_binary_mask(self.et, "et")
        self.tc = check_binary_mask(self.tc, "tc")
        self.wt = check_binary_mask(self.wt, "wt")
        check_same_shape(self.et, self.tc, self.wt, names=("et", "tc", "wt"))
        self.spacing = check_spacing(self.spacing)

    @property
    def shape(self):
        return tuple(self.et.shape)

    def region(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def is_nested(self) -> bool:
        return bool((self.tc >= self.et).all() and (self.wt >= self.tc).all())

    def check_nesting(self):
        if not self.is_nested():
            raise NestingViolationError(
                "region masks violate ET within TC within WT nesting"
            )


@dataclass(frozen=True)
class RegionMapping:
    """Which raw integer labels compose each evaluated region.

    The shipped default follows the common challenge convention
    (1 = necrotic core, 2 = edema, 3 = enhancing tumor):
    ET = {3}, TC = {1, 3}, WT = {1, 2, 3}. The convention is *not* fixed
    by any standard shared across datasets; verify it against your data
    and override in the pipeline config when it differs.
    """

    et_labels: frozenset = frozenset({3})
    tc_labels: frozenset = frozenset({1, 3})
    wt_labels: frozenset = frozenset({1, 2, 3})

    def __post_init__(self):
        object.__setattr__(self, "et_labels", frozenset(int(v) for v in self.et_labels))
        object.__setattr__(self, "tc_labels", frozenset(int(v) for v in self.tc_labels))
        object.__setattr__(self, "wt_labels", frozenset(int(v) for v in self.wt_labels))
        if 0 in self.wt_labels:
            raise ValueError("0 is reserved for background and cannot map to a region")
        if not (self.et_labels <= self.tc_labels <= self.wt_labels):
            raise ValueError(
                "region mapping must nest: et_labels <= tc_labels <= wt_labels"
            )

    def shells(self):
        """Disjoint label sets for the shells ET, TC\\ET, WT\\TC."""
        return (
            self.et_labels,
            self.tc_labels - self.et_labels,
            self.wt_labels - self.tc_labels,
        )

    def canonical_shell_labels(self):
        """One representative label per shell (smallest member), or None."""
        return tuple(min(s) if s else None for s in self.shells())

    @property
    def vocabulary(self) -> frozenset:
        return self.wt_labels | {0}


DEFAULT_REGION_MAPPING = RegionMapping()


@dataclass
class ManifestEntry:
    case_id: str
    t1: Path
    t1gd: Path
    t2: Path
    flair: Path
    label: Path | None = None
    split: str = "train"

    def modality_paths(self):
        return (self.t1, self.t1gd, self.t2, self.flair)


@dataclass
class DatasetManifest:
    """Resolved dataset listing; all paths verified to exist at load time."""

    entries: list

    def __post_init__(self):
        ids = [e.case_id for e in self.entries]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate case ids in manifest: {dupes}")

    def split(self, name: str):
        return [e for e in self.entries if e.split == name]

    def labeled(self, split: str | None = None):
        entries = self.entries if split is None else self.split(split)
        return [e for e in entries if e.label is not None]

    def by_id(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(f"case id {case_id!r} not in manifest")

    @property
    def case_ids(self):
        return [e.case_id for e in self.entries]


def load_manifest(path) -> DatasetManifest:
    """Load a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError(f"{path}: manifest must be a JSON list of case records")

    base = path.parent
    entries = []
    for rec in records:
        missing = [k for k in ("case_id", *MODALITY_NAMES) if k not in rec]
        if missing:
            raise ValueError(f"{path}: manifest record missing keys {missing}: {rec}")
        paths = {m: (base / rec[m]).resolve() for m in MODALITY_NAMES}
        label = (base / rec["label"]).resolve() if rec.get("label") else None
        for p in [*paths.values()] + ([label] if label else []):
            if not p.exists():
                raise MissingFileError(f"manifest path does not exist: {p}")
        entries.append(
            ManifestEntry(
                case_id=str(rec["case_id"]),
                t1=paths["t1"],
                t1gd=paths["t1gd"],
                t2=paths["t2"],
                flair=paths["flair"],
                label=label,
                split=rec.get("split", "train"),
            )
        )
    return DatasetManifest(entries=entries)



def load_volume(paths, case_id: str = "") -> MultiModalVolume:
    """Load and channel-stack the four modality files of one case.

    Spacing and affine come from the first modality; the other headers
    must agree within ``HEADER_TOLERANCE`` and all shapes must match.
    """
    paths = [Path(p) for p in paths]
    if len(paths) != 4:
        raise ValueError(f"expected 4 modality paths, got {len(paths)}")
    for p in paths:
        if not p.exists():
            raise MissingFileError(f"modality file not found: {p}")

    channels, affines, spacings = [], [], []
    for p in paths:
        data, affine, spacing = nifti.read_nifti(p)
        channels.append(np.asarray(data, dtype=np.float32))
        affines.append(affine)
        spacings.append(spacing)

    shapes = {c.shape for c in channels}
    if len(shapes) > 1:
        raise ShapeMismatchError(
            f"case {case_id!r}: modality shapes differ: {sorted(shapes)}"
        )
    for p, affine, spacing in zip(paths[1:], affines[1:], spacings[1:]):
        if np.abs(affine - affines[0]).max() > HEADER_TOLERANCE:
            raise HeaderMismatchError(f"case {case_id!r}: affine of {p} disagrees")
        if np.abs(spacing - spacings[0]).max() > HEADER_TOLERANCE:
            raise HeaderMismatchError(f"case {case_id!r}: spacing of {p} disagrees")

    return MultiModalVolume(
        data=np.stack(channels, axis=0),
        spacing=spacings[0],
        affine=affines[0],
        case_id=case_id,
    )


def save_volume(directory, vol: MultiModalVolume, dtype=np.float32):
    """Write one file per modality; returns the four paths."""
    directory = Path(directory)
    paths = []
    for i, name in enumerate(MODALITY_NAMES):
        p = directory / f"{vol.case_id}_{name}.nii.gz"
        nifti.write_nifti(p, vol.data[i].astype(dtype), vol.affine, vol.spacing)
        paths.append(p)
    return paths


def load_label_map(path, vocabulary=None, case_id: str = "") -> LabelMap:
    data, _, _ = nifti.read_nifti(path)
    data = np.rint(np.asarray(data)).astype(np.int16)
    if vocabulary is None:
        vocabulary = frozenset(np.unique(data).tolist()) | {0}
    return LabelMap(data=data, label_vocabulary=vocabulary, case_id=case_id)


def save_label_map(path, lm: LabelMap, affine=None, spacing=None):
    nifti.write_nifti(path, lm.data.astype(np.int16), affine, spacing)


def normalize_intensities(vol: MultiModalVolume) -> MultiModalVolume:
    """Z-score each channel over its nonzero (brain) voxels.

    Background voxels (exact zeros) stay exactly 0, and a channel whose
    in-mask intensities have zero variance maps to all zeros.
    """
    out = np.zeros_like(vol.data, dtype=np.float32)
    for c in range(vol.data.shape[0]):
        channel = vol.data[c]
        mask = channel != 0
        if not mask.any():
            continue
        values = channel[mask].astype(np.float64)
        mean = values.mean()
        std = values.std()
        if std == 0:
            continue
        out[c][mask] = ((values - mean) / std).astype(np.float32)
    return MultiModalVolume(
        data=out, spacing=vol.spacing, affine=vol.affine, case_id=vol.case_id
    )


def labels_to_regions(lm: LabelMap, mapping: RegionMapping) -> RegionMaskSet:
    """Expand an integer label map into the three overlapping region masks."""
    present = set(np.unique(lm.data).tolist())
    unknown = present - lm.label_vocabulary
    if unknown:
        raise UnknownLabelError(f"labels outside vocabulary: {sorted(unknown)}")
    masks = []
    for labels in (mapping.et_labels, mapping.tc_labels, mapping.wt_labels):
        masks.append(np.isin(lm.data, sorted(labels)))
    return RegionMaskSet(et=masks[0], tc=masks[1], wt=masks[2])


def regions_to_labels(rm: RegionMaskSet, mapping: RegionMapping) -> LabelMap:
    """Collapse nested region masks back to a canonical integer label map.

    Each shell (ET, TC minus ET, WT minus TC) gets the mapping's canonical
    representative label. Inverse of ``labels_to_regions`` whenever the
    source labels were already canonical.
    """
    rm.check_nesting()
    et_label, core_label, edema_label = mapping.canonical_shell_labels()
    out = np.zeros(rm.shape, dtype=np.int16)

    shells = (
        (rm.wt & ~rm.tc, edema_label, "WT\\TC"),
        (rm.tc & ~rm.et, core_label, "TC\\ET"),
        (rm.et, et_label, "ET"),
    )
    for shell_mask, label, name in shells:
        if not shell_mask.any():
            continue
        if label is None:
            raise UnknownLabelError(
                f"mapping has no label for nonempty shell {name}"
            )
        out[shell_mask] = label
    return LabelMap(data=out, label_vocabulary=mapping.vocabulary)
