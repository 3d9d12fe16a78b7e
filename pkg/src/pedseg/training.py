"""Optimization of one model variant against one loss family.

The loop is patch-based: each step samples a labeled case, optionally
augments it, crops a patch (biased toward tumor-containing regions),
and takes one optimizer step on the hybrid loss over sigmoid
probabilities. Validation tracks plain per-region Dice at a fixed
threshold; the best-scoring weights are kept separately from the
last-step weights used for resuming.

Everything is deterministic given the config seed on a fixed device
class: the numpy stream drives case/patch/augmentation sampling, torch
RNG covers dropout, and both states ride along in checkpoints so a
resumed run continues the exact trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentationPolicy, apply_transform, sample_transform
from .checkpoints import load_checkpoint, save_checkpoint
from .errors import DivergedLossError, EmptyDatasetError, InvalidSpecError
from .inference import predict_logits
from .losses import LossConfig, combined_loss
from .metrics import dice_score
from .models import ModelHandle, build_model, model_from_state, spec_for_variant
from .validation import REGION_NAMES
from .volume import (
    DEFAULT_REGION_MAPPING,
    DatasetManifest,
    LabelMap,
    MultiModalVolume,
    RegionMapping,
    RegionMaskSet,
    labels_to_regions,
    load_label_map,
    load_volume,
    normalize_intensities,
)

OPTIMIZER_KINDS = ("adam", "adamw", "sgd")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZER_KINDS}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


@dataclass
class TrainConfig:
    variant: str = "unet3d"
    depth: int = 4
    base_channels: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationPolicy | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 1
    max_epochs: int = 10
    patch_size: tuple = (96, 96, 96)
    validation_interval: int = 1  # epochs between validations
    early_stop_patience: int = 0  # validations without improvement; 0 disables
    tumor_patch_fraction: float = 0.5
    threshold: float = 0.5
    seed: int = 0
    num_threads: int = 1  # intra-op threads pinned for reproducibility

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        factor = 2 ** (self.depth - 1)
        if any(p % factor for p in self.patch_size):
            raise InvalidSpecError(
                f"patch size {self.patch_size} must be divisible by {factor} "
                f"(depth {self.depth})"
            )
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")
        if not 0.0 <= self.tumor_patch_fraction <= 1.0:
            raise ValueError("tumor_patch_fraction must be in [0, 1]")


def make_optimizer(cfg: OptimizerConfig, module: torch.nn.Module):
    if cfg.kind == "adam":
        return torch.optim.Adam(module.parameters(), lr=cfg.learning_rate,
                                weight_decay=cfg.weight_decay)
    if cfg.kind == "adamw":
        return torch.optim.AdamW(module.parameters(), lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    return torch.optim.SGD(module.parameters(), lr=cfg.learning_rate,
                           weight_decay=cfg.weight_decay, momentum=0.9)


def load_training_cases(manifest: DatasetManifest, split=None):
    """Load, normalize, and pair up every labeled case of a split."""
    cases = []
    for entry in manifest.labeled(split):
        vol = normalize_intensities(
            load_volume(entry.modality_paths(), entry.case_id)
        )
        labels = load_label_map(entry.label, case_id=entry.case_id)
        cases.append((vol, labels))
    return cases


def regions_stack(rm: RegionMaskSet) -> np.ndarray:
    return np.stack([rm.region(n) for n in REGION_NAMES]).astype(np.float32)


def _pad_to_patch(image, labels, patch):
    shape = image.shape[1:]
    pad = [(0, max(p - s, 0)) for s, p in zip(shape, patch)]
    if not any(hi for _, hi in pad):
        return image, labels
    return (np.pad(image, [(0, 0)] + pad), np.pad(labels, pad))


def _patch_slices(shape, patch, wt_mask, rng, tumor_fraction):
    """Random crop window, biased toward tumor-containing patches."""
    if wt_mask.any() and rng.random() < tumor_fraction:
        voxels = np.argwhere(wt_mask)
        center = voxels[int(rng.integers(0, len(voxels)))]
        starts = [
            int(np.clip(center[d] - patch[d] // 2, 0, shape[d] - patch[d]))
            for d in range(3)
        ]
    else:
        starts = [int(rng.integers(0, shape[d] - patch[d] + 1)) for d in range(3)]
    return tuple(slice(s, s + p) for s, p in zip(starts, patch))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainResult:
    handle: ModelHandle          # best-validation weights
    best_scores: dict            # per-region dice at the best validation
    history: list                # chronological log records
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None


def validate(model, cases, threshold: float = 0.5, patch_size=(96, 96, 96),
             overlap: float = 0.25) -> dict:
    """Mean plain Dice per region over labeled cases.

    ``cases`` holds (volume, RegionMaskSet) pairs; predictions binarize
    the sigmoid probabilities at ``threshold``.
    """
    totals = {name: 0.0 for name in REGION_NAMES}
    for vol, gt in cases:
        logits = predict_logits(model, vol, patch_size, overlap)
        probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        for i, name in enumerate(REGION_NAMES):
            totals[name] += dice_score(probs[i] > threshold, gt.region(name))
    n = max(len(cases), 1)
    return {name: totals[name] / n for name in REGION_NAMES}


def fit_model(cfg: TrainConfig, train_cases, val_cases=None,
              mapping: RegionMapping = DEFAULT_REGION_MAPPING,
              out_dir=None, resume=None, log_fn=None) -> TrainResult:
    """Train on in-memory (volume, labels) cases; returns the best model.

    ``resume`` points at a previously written last-checkpoint; the run
    continues bit-identically where it stopped (same device class and
    thread count).
    """
    if not train_cases:
        raise EmptyDatasetError("training requires at least one labeled case")
    val_cases = val_cases or train_cases

    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))

    spec = spec_for_variant(cfg.variant, depth=cfg.depth,
                            base_channels=cfg.base_channels)
    handle = build_model(spec, init_seed=cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, handle.module)

    start_epoch = 0
    global_step = 0
    best = None
    best_model = None
    stale_validations = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        handle = model_from_state(payload["model"])
        optimizer = make_optimizer(cfg.optimizer, handle.module)
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"]
        global_step = payload["step"]
        best = payload.get("best")
        rng_payload = payload.get("rng") or {}
        if "numpy" in rng_payload:
            rng = _restore_rng(rng_payload["numpy"])
        if "torch" in rng_payload:
            torch.set_rng_state(rng_payload["torch"])
        if best is not None:
            best = dict(best)
            stale_validations = best.pop("stale_validations", 0)
            best_ckpt = Path(resume).with_name("checkpoint_best.pt")
            if best_ckpt.exists():
                best_model = model_from_state(
                    load_checkpoint(best_ckpt)["model"]
                ).module.state_dict()

    # pad once so every case supports the crop window
    prepared = []
    for vol, labels in train_cases:
        image, label_data = _pad_to_patch(vol.data, labels.data, cfg.patch_size)
        prepared.append((
            MultiModalVolume(data=image, spacing=vol.spacing, affine=vol.affine,
                             case_id=vol.case_id),
            LabelMap(data=label_data, label_vocabulary=labels.label_vocabulary,
                     case_id=labels.case_id),
        ))
    val_prepared = [
        (vol, labels_to_regions(labels, mapping)) for vol, labels in val_cases
    ]

    out_dir = Path(out_dir) if out_dir is not None else None
    history = []

    def emit(record):
        history.append(record)
        if log_fn is not None:
            log_fn(record)

    def run_validation(epoch):
        nonlocal best, best_model, stale_validations
        handle.trained_steps = global_step
        scores = validate(handle, val_prepared, cfg.threshold, cfg.patch_size)
        mean_dice = float(np.mean(list(scores.values())))
        emit({"step": global_step, "epoch": epoch, "val_dice": scores,
              "val_dice_mean": mean_dice})
        if best is None or mean_dice > best["mean_dice"]:
            best = {"mean_dice": mean_dice, "per_region": scores, "epoch": epoch}
            best_model = {k: (v.clone() if torch.is_tensor(v) else v)
                          for k, v in
                          handle.module.state_dict().items()}
            stale_validations = 0
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoint_best.pt", handle,
                                optimizer_state=None, epoch=epoch + 1,
                                step=global_step, best=best)
        else:
            stale_validations += 1
        return stale_validations

    steps_per_epoch = max(1, math.ceil(len(prepared) / cfg.batch_size))
    lr = cfg.optimizer.learning_rate
    stop = False
    last_path = None
    for epoch in range(start_epoch, cfg.max_epochs):
        for _ in range(steps_per_epoch):
            batch_x, batch_y = [], []
            for _ in range(cfg.batch_size):
                vol, labels = prepared[int(rng.integers(0, len(prepared)))]
                if cfg.augmentation is not None:
                    transform = sample_transform(cfg.augmentation, rng)
                    if not transform.is_identity:
                        vol, labels = apply_transform(transform, vol, labels)
                regions = regions_stack(labels_to_regions(labels, mapping))
                window = _patch_slices(vol.data.shape[1:], cfg.patch_size,
                                       regions[2] > 0, rng,
                                       cfg.tumor_patch_fraction)
                batch_x.append(vol.data[(slice(None), *window)])
                batch_y.append(regions[(slice(None), *window)])

            x = torch.from_numpy(np.stack(batch_x))
            y = torch.from_numpy(np.stack(batch_y))
            handle.module.train(True)
            logits = handle.module(x)
            loss = combined_loss(torch.sigmoid(logits), y, cfg.loss)
            if not torch.isfinite(loss):
                raise DivergedLossError(
                    f"non-finite loss {loss.item()} at step {global_step + 1} "
                    f"(epoch {epoch}); check learning rate and inputs"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            handle.module.eval()
            global_step += 1
            emit({"step": global_step, "epoch": epoch,
                  "loss": float(loss.item()), "lr": lr})

        is_last_epoch = epoch == cfg.max_epochs - 1
        if (epoch + 1) % cfg.validation_interval == 0 or is_last_epoch:
            stale = run_validation(epoch)
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                emit({"step": global_step, "epoch": epoch, "early_stop": True})
                stop = True

        if out_dir is not None:
            handle.trained_steps = global_step
            last_best = (
                {**best, "stale_validations": stale_validations}
                if best is not None else None
            )
            last_path = save_checkpoint(
                out_dir / "checkpoint_last.pt", handle,
                optimizer_state=optimizer.state_dict(), epoch=epoch + 1,
                step=global_step, best=last_best,
                rng_state={"numpy": _rng_state(rng),
                           "torch": torch.get_rng_state()},
            )
        if stop:
            break

    if best is None:  # no validation ran (shouldn't happen); score final state
        run_validation(cfg.max_epochs - 1)

    best_handle = handle
    if best_model is not None:
        best_handle = build_model(spec, init_seed=cfg.seed)
        best_handle.module.load_state_dict(best_model)
    best_handle.trained_steps = global_step
    best_path = out_dir / "checkpoint_best.pt" if out_dir is not None else None
    if out_dir is not None:
        save_checkpoint(best_path, best_handle, optimizer_state=None,
                        epoch=best["epoch"] + 1, step=global_step, best=best)

    return TrainResult(handle=best_handle, best_scores=best["per_region"],
                       history=history, best_checkpoint=best_path,
                       last_checkpoint=last_path)


def train(cfg: TrainConfig, manifest: DatasetManifest,
          mapping: RegionMapping = DEFAULT_REGION_MAPPING,
          out_dir=None, resume=None, log_stream=None) -> TrainResult:
    """Manifest-level entry point: loads cases, trains, writes checkpoints.

    Uses entries tagged split="train" for optimization and split="val"
    for model selection (falling back to the training cases when no
    validation split exists). Emits line-delimited JSON log records to
    ``log_stream`` and, when ``out_dir`` is set, to train_log.jsonl.
    """
    train_cases = load_training_cases(manifest, "train")
    if not train_cases:
        raise EmptyDatasetError("manifest has no labeled cases tagged split=train")
    val_cases = load_training_cases(manifest, "val") or None

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        log_file = open(out_dir / "train_log.jsonl", mode, encoding="utf-8")

    def log_fn(record):
        line = json.dumps(record, sort_keys=True)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if log_stream is not None:
            print(line, file=log_stream)

    try:
        return fit_model(cfg, train_cases, val_cases, mapping=mapping,
                         out_dir=out_dir, resume=resume, log_fn=log_fn)
    finally:
        if log_file is not None:
            log_file.close()

