"""The end-to-end desk-scale workflow used for golden-file verification.

Chain: generate 3 phantoms -> train 3 tiny variants -> ensemble their
checkpoints -> postprocess -> evaluate. Everything is seeded, so the
evaluation reports are byte-stable on a fixed device class.

Run ``python tests/golden_workflow.py`` to (re)generate the committed
golden reports under tests/golden/.
"""

import json
from pathlib import Path

import yaml
from click.testing import CliRunner

from pedseg.cli import main
from pedseg.phantoms import write_phantom_dataset

GOLDEN_DIR = Path(__file__).parent / "golden"

WORKFLOW_VARIANTS = ("unet3d", "unet3d_gelu", "onet3d_singleconv_k1")


def workflow_config(variant: str) -> dict:
    return {
        "seed": 2024,
        "output_dir": f"runs/{variant}",
        "data": {
            "manifest": "data/manifest.json",
            "region_mapping": {"et": [3], "tc": [1, 3], "wt": [1, 2, 3]},
        },
        "train": {
            "variant": variant,
            "depth": 3,
            "base_channels": 8,
            "loss": {"family": "bce_dice", "alpha": 0.5, "beta": 0.5},
            "optimizer": {"kind": "adam", "learning_rate": 3e-3},
            "batch_size": 1,
            "max_epochs": 100,
            "patch_size": [32, 32, 32],
            "validation_interval": 25,
            "num_threads": 1,
        },
        "ensemble": {"threshold": 0.0, "tie_break": "positive",
                     "patch_size": [32, 32, 32], "overlap": 0.25},
        "postprocess": {"min_component_size": 10, "connectivity": 26,
                        "smoothing": "closing_then_opening",
                        "smoothing_radius": 1},
        "metrics": {"connectivity": 26, "dilation_radius": 1},
    }


def run_chain(root: Path) -> dict:
    """Execute the full CLI chain under ``root``; returns artifact paths."""
    root = Path(root)
    write_phantom_dataset(root / "data", n_cases=3, shape=(32, 32, 32), seed=9)
    case_ids = ["phantom_000", "phantom_001", "phantom_002"]
    runner = CliRunner()

    def invoke(args):
        result = runner.invoke(main, args, catch_exceptions=False)
        if result.exit_code != 0:
            raise RuntimeError(f"{args} failed ({result.exit_code}): {result.output}")
        return result

    checkpoints = []
    for variant in WORKFLOW_VARIANTS:
        config_path = root / f"{variant}.yaml"
        config_path.write_text(yaml.safe_dump(workflow_config(variant)))
        invoke(["train", "--config", str(config_path)])
        checkpoints.append(root / "runs" / variant / "checkpoint_best.pt")

    members_path = root / "members.json"
    members_path.write_text(json.dumps({
        "groups": [[str(c)] for c in checkpoints],
        "threshold": 0.0,
        "tie_break": "positive",
        "patch_size": [32, 32, 32],
        "overlap": 0.25,
    }))

    base_config = root / f"{WORKFLOW_VARIANTS[0]}.yaml"
    raw_dir = root / "runs" / "ensemble_raw"
    invoke(["ensemble", "--config", str(base_config), "--output", str(raw_dir),
            "--members", str(members_path), *case_ids])

    refined_dir = root / "runs" / "refined"
    invoke(["postprocess", "--config", str(base_config), "--output",
            str(refined_dir), "--input", str(raw_dir), *case_ids])

    eval_dir = root / "runs" / "eval"
    invoke(["evaluate", "--config", str(base_config), "--output",
            str(eval_dir), "--pred", str(refined_dir), *case_ids])

    invoke(["report", "--config", str(base_config), "--output", str(eval_dir),
            "--pred", str(refined_dir), case_ids[0]])

    return {
        "report_csv": eval_dir / "report.csv",
        "aggregate_json": eval_dir / "aggregate.json",
        "report_md": eval_dir / "report.md",
    }


def main_generate():
    import tempfile

    GOLDEN_DIR.mkdir(exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        artifacts = run_chain(Path(tmp))
        for name in ("report_csv", "aggregate_json"):
            target = GOLDEN_DIR / artifacts[name].name
            target.write_bytes(artifacts[name].read_bytes())
            print(f"wrote {target}")


if __name__ == "__main__":
    main_generate()
