"""Pipeline configuration: one YAML/JSON document, strictly validated.

Unknown keys are rejected (jsonschema with additionalProperties=false),
``${VAR}`` references interpolate from the environment before
validation, and subcommand flags override the corresponding keys. The
parsed document materializes into the typed configs of each module.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .augmentation import AugmentationPolicy, params_from_dict
from .errors import ConfigError
from .losses import LossConfig
from .postprocess import PostprocConfig
from .training import OptimizerConfig, TrainConfig
from .volume import DEFAULT_REGION_MAPPING, RegionMapping

_TRANSFORM_BLOCK = {
    "type": "object",
    "properties": {
        "kind": {"type": "string"},
        "probability": {"type": "number", "minimum": 0, "maximum": 1},
        "axis_probabilities": {"type": "array", "items": {"type": "number"}},
        "rotation_degrees": {"type": "number"},
        "scale_range": {"type": "array", "items": {"type": "number"}},
        "translation_mm": {"type": "number"},
        "grid_points": {"type": "integer"},
        "max_displacement_mm": {"type": "number"},
        "std_fraction_range": {"type": "array", "items": {"type": "number"}},
        "out_range": {"type": "array", "items": {"type": "number"}},
        "order": {"type": "integer"},
        "coefficient_range": {"type": "array", "items": {"type": "number"}},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_INT_TRIPLE = {
    "type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "data": {
            "type": "object",
            "properties": {
                "manifest": {"type": "string"},
                "region_mapping": {
                    "type": "object",
                    "properties": {
                        "et": {"type": "array", "items": {"type": "integer"}},
                        "tc": {"type": "array", "items": {"type": "integer"}},
                        "wt": {"type": "array", "items": {"type": "integer"}},
                    },
                    "required": ["et", "tc", "wt"],
                    "additionalProperties": False,
                },
            },
            "required": ["manifest"],
            "additionalProperties": False,
        },
        "augmentation": {
            "type": "object",
            "properties": {
                "seed": {"type": "integer"},
                "singles": {"type": "array", "items": _TRANSFORM_BLOCK},
                "composite": {
                    "type": "object",
                    "properties": {
                        "probability": {"type": "number", "minimum": 0,
                                        "maximum": 1},
                        "transforms": {"type": "array",
                                       "items": _TRANSFORM_BLOCK},
                    },
                    "required": ["probability", "transforms"],
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "variant": {"type": "string"},
                "depth": {"type": "integer", "minimum": 2},
                "base_channels": {"type": "integer", "minimum": 1},
                "loss": {
                    "type": "object",
                    "properties": {
                        "family": {"enum": ["bce_dice", "bce_gdl"]},
                        "alpha": {"type": "number", "minimum": 0},
                        "beta": {"type": "number", "minimum": 0},
                        "epsilon": {"type": "number"},
                        "prob_clamp": {"type": "number"},
                    },
                    "additionalProperties": False,
                },
                "optimizer": {
                    "type": "object",
                    "properties": {
                        "kind": {"enum": ["adam", "adamw", "sgd"]},
                        "learning_rate": {"type": "number"},
                        "weight_decay": {"type": "number"},
                    },
                    "additionalProperties": False,
                },
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patch_size": _INT_TRIPLE,
                "validation_interval": {"type": "integer", "minimum": 1},
                "early_stop_patience": {"type": "integer", "minimum": 0},
                "tumor_patch_fraction": {"type": "number", "minimum": 0,
                                         "maximum": 1},
                "threshold": {"type": "number"},
                "num_threads": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "ensemble": {
            "type": "object",
            "properties": {
                "threshold": {"type": "number"},
                "tie_break": {"enum": ["positive", "negative"]},
                "patch_size": _INT_TRIPLE,
                "overlap": {"type": "number", "minimum": 0,
                            "exclusiveMaximum": 1},
            },
            "additionalProperties": False,
        },
        "postprocess": {
            "type": "object",
            "properties": {
                "min_component_size": {
                    "anyOf": [
                        {"type": "number", "minimum": 0},
                        {
                            "type": "object",
                            "properties": {
                                "et": {"type": "number", "minimum": 0},
                                "tc": {"type": "number", "minimum": 0},
                                "wt": {"type": "number", "minimum": 0},
                            },
                            "additionalProperties": False,
                        },
                    ]
                },
                "size_units": {"enum": ["voxels", "mm3"]},
                "connectivity": {"enum": [6, 18, 26]},
                "smoothing": {"enum": ["none", "closing_then_opening"]},
                "smoothing_radius": {"type": "integer", "minimum": 1},
                "enforce_hierarchy": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "metrics": {
            "type": "object",
            "properties": {
                "connectivity": {"enum": [6, 18, 26]},
                "dilation_radius": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "required": ["data"],
    "additionalProperties": False,
}

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate_env(node):
    if isinstance(node, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]
        return _ENV_PATTERN.sub(sub, node)
    if isinstance(node, list):
        return [_interpolate_env(v) for v in node]
    if isinstance(node, dict):
        return {k: _interpolate_env(v) for k, v in node.items()}
    return node


@dataclass
class PipelineConfig:
    manifest_path: Path
    output_dir: Path
    seed: int = 0
    mapping: RegionMapping = DEFAULT_REGION_MAPPING
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble_defaults: dict = field(default_factory=dict)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    metrics: dict = field(default_factory=lambda: {"connectivity": 26,
                                                   "dilation_radius": 1})
    raw: dict = field(default_factory=dict)

    def resolved_plan(self) -> dict:
        """The effective configuration, for --dry-run and provenance."""
        return {
            "manifest": str(self.manifest_path),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "region_mapping": {
                "et": sorted(self.mapping.et_labels),
                "tc": sorted(self.mapping.tc_labels),
                "wt": sorted(self.mapping.wt_labels),
            },
            "train": {
                "variant": self.train.variant,
                "depth": self.train.depth,
                "base_channels": self.train.base_channels,
                "loss": self.train.loss.family,
                "alpha": self.train.loss.alpha,
                "beta": self.train.loss.beta,
                "optimizer": self.train.optimizer.kind,
                "learning_rate": self.train.optimizer.learning_rate,
                "batch_size": self.train.batch_size,
                "max_epochs": self.train.max_epochs,
                "patch_size": list(self.train.patch_size),
                "augmentation": self.train.augmentation is not None,
                "seed": self.train.seed,
            },
            "ensemble": dict(self.ensemble_defaults),
            "postprocess": {
                "min_component_size": self.postproc.min_component_size,
                "size_units": self.postproc.size_units,
                "connectivity": self.postproc.connectivity,
                "smoothing": self.postproc.smoothing,
                "smoothing_radius": self.postproc.smoothing_radius,
                "enforce_hierarchy": self.postproc.enforce_hierarchy,
            },
            "metrics": dict(self.metrics),
        }


def _build_policy(block: dict) -> AugmentationPolicy:
    singles = []
    for item in block.get("singles", []):
        item = dict(item)
        probability = item.pop("probability", 1.0)
        singles.append((params_from_dict(item), probability))
    composite = []
    composite_probability = 0.0
    if "composite" in block:
        composite_probability = block["composite"]["probability"]
        composite = [params_from_dict(t) for t in block["composite"]["transforms"]]
    return AugmentationPolicy(singles=singles, composite=composite,
                              composite_probability=composite_probability,
                              seed=block.get("seed", 0))


def load_pipeline_config(path, seed_override=None, output_override=None) -> PipelineConfig:
    """Parse, interpolate, schema-validate, and materialize a config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            document = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    document = _interpolate_env(document)
    try:
        jsonschema.validate(document, SCHEMA)
    except jsonschema.ValidationError as exc:
        location = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid config at {location}: {exc.message}") from exc

    base = path.parent
    seed = seed_override if seed_override is not None else document.get("seed", 0)

    mapping = DEFAULT_REGION_MAPPING
    if "region_mapping" in document["data"]:
        rm = document["data"]["region_mapping"]
        try:
            mapping = RegionMapping(et_labels=rm["et"], tc_labels=rm["tc"],
                                    wt_labels=rm["wt"])
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid region mapping: {exc}") from exc

    policy = None
    if "augmentation" in document:
        try:
            policy = _build_policy(document["augmentation"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: invalid augmentation: {exc}") from exc

    train_block = dict(document.get("train", {}))
    try:
        loss = LossConfig(**train_block.pop("loss", {}))
        optimizer = OptimizerConfig(**train_block.pop("optimizer", {}))
        if "patch_size" in train_block:
            train_block["patch_size"] = tuple(train_block["patch_size"])
        train_cfg = TrainConfig(loss=loss, optimizer=optimizer, seed=seed,
                                augmentation=policy, **train_block)
        postproc_block = dict(document.get("postprocess", {}))
        if isinstance(postproc_block.get("min_component_size"), dict):
            postproc_block["min_component_size"] = dict(
                postproc_block["min_component_size"]
            )
        postproc = PostprocConfig(**postproc_block)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid config: {exc}") from exc

    metrics = {"connectivity": 26, "dilation_radius": 1}
    metrics.update(document.get("metrics", {}))

    output_dir = Path(output_override) if output_override else (
        base / document.get("output_dir", "runs")
    )
    return PipelineConfig(
        manifest_path=(base / document["data"]["manifest"]).resolve(),
        output_dir=output_dir,
        seed=seed,
        mapping=mapping,
        train=train_cfg,
        ensemble_defaults=dict(document.get("ensemble", {})),
        postproc=postproc,
        metrics=metrics,
        raw=document,
    )

