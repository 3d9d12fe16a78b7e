"""Command-line entry point for the full segmentation workflow.

Subcommands: train, predict, ensemble, postprocess, evaluate, report.
Exit codes: 0 success, 2 config/dataset problems, 3 missing checkpoint,
4 evaluation case-id mismatch. Progress and diagnostics stream as
line-delimited JSON on stderr; artifacts land under the configured (or
--output) directory.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import nifti
from .checkpoints import load_model_handle
from .config import load_pipeline_config
from .errors import ConfigError, MissingFileError, PedsegError
from .inference import (
    ensemble_predict,
    fuse_group,
    load_ensemble_config,
    predict_logits,
)
from .metrics import (
    METRIC_COLUMNS,
    evaluate_cohort,
    write_aggregate_json,
    write_report_csv,
)
from .postprocess import enforce_hierarchy, postprocess_case
from .training import train as run_training
from .validation import REGION_NAMES
from .volume import (
    RegionMaskSet,
    labels_to_regions,
    load_label_map,
    load_manifest,
    load_volume,
    normalize_intensities,
    regions_to_labels,
    save_label_map,
)

EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_CASE_MISMATCH = 4


def log_event(**fields):
    print(json.dumps(fields, sort_keys=True), file=sys.stderr)


def common_options(fn):
    for option in (
        click.option("--config", "config_path", required=True,
                     type=click.Path(), help="pipeline config file"),
        click.option("--seed", type=int, default=None,
                     help="override the config seed"),
        click.option("--output", "output_override", type=click.Path(),
                     default=None, help="override the output directory"),
        click.option("--dry-run", is_flag=True,
                     help="validate config, print the resolved plan, exit"),
    ):
        fn = option(fn)
    return fn


def load_config_or_exit(config_path, seed, output_override):
    try:
        return load_pipeline_config(config_path, seed, output_override)
    except ConfigError as exc:
        log_event(event="config_error", message=str(exc))
        sys.exit(EXIT_CONFIG)


def handle_dry_run(cfg, command):
    plan = cfg.resolved_plan()
    plan["command"] = command
    print(json.dumps(plan, indent=2, sort_keys=True))
    sys.exit(0)


def load_manifest_or_exit(cfg):
    try:
        return load_manifest(cfg.manifest_path)
    except (MissingFileError, ValueError) as exc:
        log_event(event="dataset_error", message=str(exc))
        sys.exit(EXIT_CONFIG)


def _mask_path(directory, case_id, region):
    return Path(directory) / f"{case_id}_{region}.nii.gz"


def write_prediction(directory, case_id, rm: RegionMaskSet, mapping, affine):
    """Write the three region masks plus a canonical exported label map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in REGION_NAMES:
        nifti.write_nifti(_mask_path(directory, case_id, name),
                          rm.region(name).astype(np.uint8), affine, rm.spacing)
    # raw masks may violate nesting; the canonical label export closes them
    exported = regions_to_labels(enforce_hierarchy(rm), mapping)
    save_label_map(directory / f"{case_id}_seg.nii.gz", exported,
                   affine=affine, spacing=rm.spacing)


def read_prediction(directory, case_id) -> RegionMaskSet:
    masks = {}
    spacing = (1.0, 1.0, 1.0)
    for name in REGION_NAMES:
        path = _mask_path(directory, case_id, name)
        data, _, spacing = nifti.read_nifti(path)
        masks[name] = data.astype(bool)
    return RegionMaskSet(spacing=spacing, **masks)


def _resolve_cases(manifest, case_ids):
    try:
        return [manifest.by_id(cid) for cid in case_ids]
    except KeyError as exc:
        log_event(event="dataset_error", message=str(exc))
        sys.exit(EXIT_CONFIG)


@click.group()
@click.version_option(package_name="pedseg")
def main():
    """Volumetric tumor segmentation: train, ensemble, refine, evaluate."""


@main.command("train")
@common_options
@click.option("--resume", "resume_path", type=click.Path(), default=None,
              help="continue from a previously written checkpoint_last.pt")
def cmd_train(config_path, seed, output_override, dry_run, resume_path):
    """Train one model variant per the config's train block."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "train")
    manifest = load_manifest_or_exit(cfg)
    if resume_path is not None and not Path(resume_path).exists():
        log_event(event="missing_checkpoint", path=str(resume_path))
        sys.exit(EXIT_MISSING_CHECKPOINT)
    try:
        result = run_training(cfg.train, manifest, mapping=cfg.mapping,
                              out_dir=cfg.output_dir, resume=resume_path,
                              log_stream=sys.stderr)
    except PedsegError as exc:
        log_event(event="training_error", message=str(exc))
        sys.exit(EXIT_CONFIG)
    log_event(event="train_complete",
              best_checkpoint=str(result.best_checkpoint),
              best_scores=result.best_scores)


def _predict_cases(cfg, manifest, case_ids, predict_fn):
    import torch

    torch.set_num_threads(cfg.train.num_threads)  # reproducibility-first
    out_dir = Path(cfg.output_dir)
    for entry in _resolve_cases(manifest, case_ids):
        vol = normalize_intensities(
            load_volume(entry.modality_paths(), entry.case_id)
        )
        rm = predict_fn(vol)
        write_prediction(out_dir, entry.case_id, rm, cfg.mapping, vol.affine)
        log_event(event="predicted", case_id=entry.case_id,
                  output=str(out_dir))


@main.command("predict")
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(), help="trained model checkpoint")
@click.argument("case_ids", nargs=-1)
def cmd_predict(config_path, seed, output_override, dry_run, checkpoint_path,
                case_ids):
    """Segment the named manifest cases with a single model."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "predict")
    if not case_ids:
        log_event(event="no_cases_requested")
        sys.exit(0)
    if not Path(checkpoint_path).exists():
        log_event(event="missing_checkpoint", path=str(checkpoint_path))
        sys.exit(EXIT_MISSING_CHECKPOINT)
    manifest = load_manifest_or_exit(cfg)
    handle = load_model_handle(checkpoint_path)
    ensemble_defaults = cfg.ensemble_defaults
    threshold = ensemble_defaults.get("threshold", 0.0)
    patch_size = tuple(ensemble_defaults.get("patch_size",
                                             cfg.train.patch_size))
    overlap = ensemble_defaults.get("overlap", 0.5)

    def predict_one(vol):
        logits = predict_logits(handle, vol, patch_size, overlap)
        return fuse_group([logits], threshold, vol.spacing)

    _predict_cases(cfg, manifest, case_ids, predict_one)


@main.command("ensemble")
@common_options
@click.option("--members", "members_path", required=True, type=click.Path(),
              help="membership file: JSON {groups, threshold, tie_break}")
@click.argument("case_ids", nargs=-1)
def cmd_ensemble(config_path, seed, output_override, dry_run, members_path,
                 case_ids):
    """Segment cases with a fused ensemble of checkpoints."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "ensemble")
    if not case_ids:
        log_event(event="no_cases_requested")
        sys.exit(0)
    if not Path(members_path).exists():
        log_event(event="missing_checkpoint", path=str(members_path))
        sys.exit(EXIT_MISSING_CHECKPOINT)
    try:
        ensemble_cfg = load_ensemble_config(members_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        log_event(event="config_error", message=f"{members_path}: {exc}")
        sys.exit(EXIT_CONFIG)
    missing = [p for group in ensemble_cfg.groups for p in group
               if not Path(p).exists()]
    if missing:
        log_event(event="missing_checkpoint", paths=missing)
        sys.exit(EXIT_MISSING_CHECKPOINT)
    manifest = load_manifest_or_exit(cfg)
    handles = [[load_model_handle(p) for p in group]
               for group in ensemble_cfg.groups]

    def predict_one(vol):
        return ensemble_predict(ensemble_cfg, vol, handles=handles)

    _predict_cases(cfg, manifest, case_ids, predict_one)


@main.command("postprocess")
@common_options
@click.option("--input", "input_dir", required=True, type=click.Path(),
              help="directory of raw predicted masks")
@click.argument("case_ids", nargs=-1)
def cmd_postprocess(config_path, seed, output_override, dry_run, input_dir,
                    case_ids):
    """Refine raw masks: size filter, smoothing, hierarchy repair."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "postprocess")
    input_dir = Path(input_dir)
    if not case_ids:
        case_ids = sorted(
            p.name[:-len("_et.nii.gz")] for p in input_dir.glob("*_et.nii.gz")
        )
    if not case_ids:
        log_event(event="no_cases_requested")
        sys.exit(0)
    out_dir = Path(cfg.output_dir)
    for case_id in case_ids:
        try:
            raw = read_prediction(input_dir, case_id)
            _, affine, _ = nifti.read_nifti(_mask_path(input_dir, case_id, "et"))
        except MissingFileError as exc:
            log_event(event="dataset_error", message=str(exc))
            sys.exit(EXIT_CONFIG)
        refined = postprocess_case(raw, cfg.postproc)
        write_prediction(out_dir, case_id, refined, cfg.mapping, affine)
        log_event(event="postprocessed", case_id=case_id, output=str(out_dir))


@main.command("evaluate")
@common_options
@click.option("--pred", "pred_dir", required=True, type=click.Path(),
              help="directory of predicted masks")
@click.argument("case_ids", nargs=-1)
def cmd_evaluate(config_path, seed, output_override, dry_run, pred_dir,
                 case_ids):
    """Score predictions against manifest labels; write CSV + JSON."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "evaluate")
    manifest = load_manifest_or_exit(cfg)
    pred_dir = Path(pred_dir)

    entries = (manifest.labeled() if not case_ids
               else _resolve_cases(manifest, case_ids))
    unlabeled = [e.case_id for e in entries if e.label is None]
    missing = [
        e.case_id for e in entries
        if e.label is not None
        and not all(_mask_path(pred_dir, e.case_id, r).exists()
                    for r in REGION_NAMES)
    ]
    if missing or unlabeled:
        log_event(event="case_id_mismatch", missing_predictions=missing,
                  unlabeled_cases=unlabeled)
        sys.exit(EXIT_CASE_MISMATCH)

    cohort = []
    for entry in entries:
        pred = read_prediction(pred_dir, entry.case_id)
        gt_labels = load_label_map(entry.label, case_id=entry.case_id)
        gt = labels_to_regions(gt_labels, cfg.mapping)
        gt.spacing = pred.spacing
        cohort.append((pred, gt, entry.case_id))

    reports, aggregate = evaluate_cohort(
        cohort, connectivity=cfg.metrics["connectivity"],
        dilation_radius=cfg.metrics["dilation_radius"],
    )
    out_dir = Path(cfg.output_dir)
    write_report_csv(out_dir / "report.csv", reports)
    write_aggregate_json(out_dir / "aggregate.json", aggregate)
    log_event(event="evaluated", cases=len(reports), output=str(out_dir))


REGION_TITLES = {"et": "ET", "tc": "TC", "wt": "WT"}
METRIC_TITLES = {
    "lw_dice": "LW Dice ↑", "dice": "Dice ↑",
    "lw_hd95": "LW HD95 ↓", "hd95": "HD95 ↓",
    "sensitivity": "Sensitivity ↑", "specificity": "Specificity ↑",
}


def render_markdown(aggregate: dict) -> str:
    lines = [
        "# Segmentation evaluation",
        "",
        f"Cases evaluated: {aggregate['n_cases']}",
        "",
        "| Sub-region | " + " | ".join(METRIC_TITLES[m] for m in METRIC_COLUMNS)
        + " |",
        "|---" * (len(METRIC_COLUMNS) + 1) + "|",
    ]
    for region in REGION_NAMES:
        row = aggregate["regions"][region]
        cells = " | ".join(f"{row[m]:.4f}" for m in METRIC_COLUMNS)
        lines.append(f"| {REGION_TITLES[region]} | {cells} |")
    lines.append("")
    return "\n".join(lines)


def export_overlays(vol, rm: RegionMaskSet, out_dir: Path, case_id: str):
    """Center axial/coronal/sagittal slices with region contours."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    background = vol.data[1]  # post-contrast channel shows ET best
    planes = {"sagittal": 0, "coronal": 1, "axial": 2}
    colors = {"wt": "tab:green", "tc": "tab:orange", "et": "tab:red"}
    written = []
    for plane, axis in planes.items():
        index = background.shape[axis] // 2
        slicer = tuple(index if a == axis else slice(None) for a in range(3))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(background[slicer].T, cmap="gray", origin="lower")
        for name in ("wt", "tc", "et"):
            mask = rm.region(name)[slicer].T
            if mask.any():
                ax.contour(mask, levels=[0.5], colors=colors[name],
                           linewidths=1.2)
        ax.set_title(f"{case_id} {plane}")
        ax.axis("off")
        path = out_dir / f"{case_id}_{plane}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


@main.command("report")
@common_options
@click.option("--aggregate", "aggregate_path", type=click.Path(), default=None,
              help="aggregate JSON (default: <output>/aggregate.json)")
@click.option("--pred", "pred_dir", type=click.Path(), default=None,
              help="predicted masks, needed for slice overlays")
@click.argument("case_ids", nargs=-1)
def cmd_report(config_path, seed, output_override, dry_run, aggregate_path,
               pred_dir, case_ids):
    """Render the aggregate metrics as markdown plus slice overlays."""
    cfg = load_config_or_exit(config_path, seed, output_override)
    if dry_run:
        handle_dry_run(cfg, "report")
    out_dir = Path(cfg.output_dir)
    aggregate_path = Path(aggregate_path) if aggregate_path else (
        out_dir / "aggregate.json"
    )
    if not aggregate_path.exists():
        log_event(event="dataset_error",
                  message=f"aggregate not found: {aggregate_path}")
        sys.exit(EXIT_CONFIG)
    with open(aggregate_path, encoding="utf-8") as fh:
        aggregate = json.load(fh)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.md"
    report_path.write_text(render_markdown(aggregate), encoding="utf-8")
    log_event(event="report_written", path=str(report_path))

    if case_ids and pred_dir:
        manifest = load_manifest_or_exit(cfg)
        for entry in _resolve_cases(manifest, case_ids):
            vol = load_volume(entry.modality_paths(), entry.case_id)
            rm = read_prediction(pred_dir, entry.case_id)
            for path in export_overlays(vol, rm, out_dir, entry.case_id):
                log_event(event="overlay_written", path=str(path))


if __name__ == "__main__":
    main()
