"""Acceptance gate: every shipped guarantee, one pass/fail line each.

Published challenge-scale scores are not reproducible at desk scale
(they need the real dataset and full GPU training), so this suite
verifies the substituted property-based criteria: oracle equivalences,
gradient checks, architecture contracts, end-to-end training sanity,
post-processing guarantees, determinism, and the golden CLI workflow.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the
per-criterion lines as they complete.
"""

import time

import numpy as np
import torch

from pedseg.inference import fuse_group, majority_vote
from pedseg.losses import (
    LossConfig,
    bce,
    combined_loss,
    dice_loss,
    gdl,
    gdl_class_weights,
)
from pedseg.metrics import (
    dice_score,
    hd95,
    lesion_wise_dice,
    lesion_wise_hd95,
    match_lesions,
)
from pedseg.models import VARIANT_NAMES, build_model, forward, spec_for_variant
from pedseg.phantoms import make_phantom
from pedseg.postprocess import PostprocConfig, postprocess_case, size_filter
from pedseg.training import TrainConfig, OptimizerConfig, fit_model, validate
from pedseg.volume import (
    DEFAULT_REGION_MAPPING,
    RegionMaskSet,
    labels_to_regions,
    normalize_intensities,
)

import oracles
from test_models import expected_parameter_count
from golden_workflow import GOLDEN_DIR, run_chain


def record(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE [{name}]: {status}{suffix}")
    assert ok, f"{name} failed {suffix}"


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300)


class TestLossCriteria:
    def test_loss_oracle_equivalence(self):
        """Five losses vs scalar loops: 200 random 4^3 x 3 instances, 1e-9."""
        rng = np.random.default_rng(101)
        start = time.monotonic()
        worst = 0.0
        for _ in range(200):
            y_hat = rng.uniform(0, 1, size=(3, 4, 4, 4))
            y = (rng.random((3, 4, 4, 4)) < 0.5).astype(np.float64)
            pairs = [
                (bce(y_hat, y, 1e-7).item(), oracles.bce_loop(y_hat, y, 1e-7)),
                (dice_loss(y_hat, y, 1e-6).item(),
                 oracles.dice_loop(y_hat, y, 1e-6)),
                (gdl(y_hat, y, 1e-6).item(), oracles.gdl_loop(y_hat, y, 1e-6)),
                (combined_loss(y_hat, y, LossConfig("bce_dice")).item(),
                 oracles.combined_loop(y_hat, y, "bce_dice", 0.5, 0.5, 1e-6, 1e-7)),
                (combined_loss(y_hat, y, LossConfig("bce_gdl")).item(),
                 oracles.combined_loop(y_hat, y, "bce_gdl", 0.5, 0.5, 1e-6, 1e-7)),
            ]
            for ours, ref in pairs:
                worst = max(worst, abs(ours - ref) / max(abs(ref), 1e-300))
        elapsed = time.monotonic() - start
        record("loss-oracle-equivalence", worst < 1e-9 and elapsed < 10.0,
               f"max rel err {worst:.2e}, {elapsed:.1f}s")

    def test_loss_gradient_checks(self):
        """Autograd vs central differences (step 1e-4) within 1e-3."""
        losses = {
            "bce": (lambda p, t: bce(p, t, 1e-7),
                    lambda p, t: oracles.bce_loop(p, t, 1e-7)),
            "dice": (lambda p, t: dice_loss(p, t, 1e-6),
                     lambda p, t: oracles.dice_loop(p, t, 1e-6)),
            "gdl": (lambda p, t: gdl(p, t, 1e-6),
                    lambda p, t: oracles.gdl_loop(p, t, 1e-6)),
            "bce_dice": (
                lambda p, t: combined_loss(p, t, LossConfig("bce_dice")),
                lambda p, t: oracles.combined_loop(p, t, "bce_dice",
                                                   0.5, 0.5, 1e-6, 1e-7)),
            "bce_gdl": (
                lambda p, t: combined_loss(p, t, LossConfig("bce_gdl")),
                lambda p, t: oracles.combined_loop(p, t, "bce_gdl",
                                                   0.5, 0.5, 1e-6, 1e-7)),
        }
        rng = np.random.default_rng(77)
        step = 1e-4
        worst = 0.0
        for trial in range(20):
            y_hat = rng.uniform(0.05, 0.95, size=(3, 3, 3, 3))
            y = (rng.random((3, 3, 3, 3)) < 0.5).astype(np.float64)
            for name, (analytic_fn, loop_fn) in losses.items():
                t = torch.tensor(y_hat, requires_grad=True)
                analytic_fn(t, torch.tensor(y)).backward()
                g_an = t.grad.numpy()
                g_fd = np.zeros_like(y_hat)
                flat = y_hat.ravel()
                fd = g_fd.ravel()
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = loop_fn(y_hat, y)
                    flat[i] = orig - step
                    down = loop_fn(y_hat, y)
                    flat[i] = orig
                    fd[i] = (up - down) / (2 * step)
                err = np.abs(g_an - g_fd).max() / max(np.abs(g_fd).max(), 1e-12)
                worst = max(worst, err)
        record("loss-gradient-checks", worst < 1e-3, f"max rel err {worst:.2e}")

    def test_gdl_class_weights_exact(self):
        """Class sizes {1, 4} give weights {1, 1/16} exactly."""
        y = np.zeros((2, 2, 2, 2))
        y[0, 0, 0, 0] = 1.0
        y[1, 0] = 1.0
        w = gdl_class_weights(y)
        record("gdl-weights-exact", w[0] == 1.0 and w[1] == 1.0 / 16.0,
               f"weights {w.tolist()}")


class TestMetricsCriteria:
    def test_metrics_oracle_equivalence(self):
        """Four metrics vs brute force on 1000 random masks up to 6^3."""
        rng = np.random.default_rng(303)
        spacing = (1.0, 1.0, 1.0)
        n_hd = 0
        worst_hd = 0.0
        worst_lw = 0.0
        for trial in range(1000):
            size = int(rng.integers(3, 7))
            shape = (size,) * 3
            pred = rng.random(shape) < rng.uniform(0.1, 0.5)
            gt = rng.random(shape) < rng.uniform(0.1, 0.5)

            assert dice_score(pred, gt) == oracles.dice_coefficient_loop(pred, gt)

            if pred.any() and gt.any():
                ours = hd95(pred, gt, spacing)
                ref = oracles.hd95_loop(pred, gt, spacing)
                worst_hd = max(worst_hd, abs(ours - ref))
                n_hd += 1

            matching = match_lesions(pred, gt)
            lw_d = lesion_wise_dice(matching)
            lw_h = lesion_wise_hd95(matching, spacing)
            ref_d = oracles.lesion_wise_dice_loop(pred, gt)
            ref_h = oracles.lesion_wise_hd95_loop(pred, gt, spacing)
            worst_lw = max(worst_lw, abs(lw_d - ref_d), abs(lw_h - ref_h))
        record("metrics-oracle-equivalence",
               worst_hd <= 1e-9 and worst_lw <= 1e-9,
               f"{n_hd} hd95 pairs, max |err| hd {worst_hd:.1e} lw {worst_lw:.1e}")

    def test_lesion_penalties_exact(self):
        """Unmatched lesions score exactly 0 (Dice) and 374 (HD95)."""
        gt = np.zeros((8, 8, 8), dtype=bool)
        gt[2:5, 2:5, 2:5] = True
        fn_match = match_lesions(np.zeros_like(gt), gt)
        fp_match = match_lesions(gt, np.zeros_like(gt))
        ok = (lesion_wise_dice(fn_match) == 0.0
              and lesion_wise_hd95(fn_match) == 374.0
              and lesion_wise_dice(fp_match) == 0.0
              and lesion_wise_hd95(fp_match) == 374.0)
        record("lesion-penalties-exact", ok)


class TestEnsembleCriteria:
    def test_majority_vote_counting_oracle(self):
        """5-member votes equal exhaustive per-voxel counting, 500 trials."""
        rng = np.random.default_rng(404)
        ok = True
        for _ in range(500):
            masks = [RegionMaskSet(et=rng.random((4, 4, 4)) < 0.5,
                                   tc=rng.random((4, 4, 4)) < 0.5,
                                   wt=rng.random((4, 4, 4)) < 0.5)
                     for _ in range(5)]
            fused = majority_vote(masks)
            for name in ("et", "tc", "wt"):
                ref = oracles.majority_vote_loop(
                    [m.region(name) for m in masks], "positive")
                ok &= bool(np.array_equal(fused.region(name), ref))
        record("ensemble-vote-counting", ok, "500 trials x 5 members")

    def test_vote_properties(self):
        """Monotonicity and permutation invariance of the vote."""
        rng = np.random.default_rng(405)
        ok = True
        for _ in range(100):
            masks = [RegionMaskSet(et=rng.random((4, 4, 4)) < 0.5,
                                   tc=rng.random((4, 4, 4)) < 0.5,
                                   wt=rng.random((4, 4, 4)) < 0.5)
                     for _ in range(5)]
            before = majority_vote(masks)
            order = rng.permutation(5)
            permuted = majority_vote([masks[i] for i in order])
            for name in ("et", "tc", "wt"):
                ok &= bool(np.array_equal(before.region(name),
                                          permuted.region(name)))
            g = int(rng.integers(0, 5))
            region = masks[g].et
            off = np.argwhere(~region)
            if len(off):
                region[tuple(off[int(rng.integers(0, len(off)))])] = True
                after = majority_vote(masks)
                ok &= not bool((before.et & ~after.et).any())
        record("ensemble-vote-properties", ok,
               "monotonicity + permutation, 100 trials")

    def test_singleton_equals_thresholding(self):
        """One-member fuse at threshold 0 is exactly the 0.5 prob cut."""
        rng = np.random.default_rng(406)
        ok = True
        for _ in range(50):
            logits = rng.standard_normal((3, 4, 4, 4)).astype(np.float32)
            from pedseg.inference import LogitsVolume
            fused = fuse_group([LogitsVolume(data=logits)], threshold=0.0)
            probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
            for i, name in enumerate(("et", "tc", "wt")):
                ok &= bool(np.array_equal(fused.region(name), probs[i] > 0.5))
        record("ensemble-singleton-exact", ok)


class TestArchitectureCriteria:
    def test_shape_and_count_contracts(self):
        """All 8 variants: (3, X, Y, Z) outputs and closed-form counts."""
        rng = np.random.default_rng(505)
        ok = True
        details = []
        for name in VARIANT_NAMES:
            spec = spec_for_variant(name, depth=3, base_channels=4)
            handle = build_model(spec, init_seed=1)
            ok &= handle.parameter_count == expected_parameter_count(spec)
            for shape in [(16, 16, 16), (16, 24, 32)]:
                out = forward(handle, rng.standard_normal((4, *shape))
                              .astype(np.float32))
                ok &= out.shape == (3, *shape) and bool(np.isfinite(out).all())
        for name in ("unet3d", "onet3d_doubleconv_k1"):
            spec = spec_for_variant(name)  # canonical full scale
            handle = build_model(spec, init_seed=1)
            ok &= handle.parameter_count == expected_parameter_count(spec)
            details.append(f"{name}: {handle.parameter_count:,} params")
        record("architecture-contracts", ok, "; ".join(details))

    def test_count_relations(self):
        """GELU == ReLU counts; SingleConv < DoubleConv."""
        small = dict(depth=3, base_channels=8)
        relu = build_model(spec_for_variant("unet3d", **small)).parameter_count
        gelu = build_model(spec_for_variant("unet3d_gelu", **small)).parameter_count
        single = build_model(
            spec_for_variant("unet3d_singleconv", **small)).parameter_count
        record("architecture-count-relations",
               relu == gelu and single < relu,
               f"relu {relu}, gelu {gelu}, singleconv {single}")


class TestTrainingCriterion:
    def test_overfit_one_phantom(self):
        """unet3d(depth 3, base 8) hits Dice >= 0.90 within 300 steps."""
        start = time.monotonic()
        vol, lm = make_phantom("accept_overfit", shape=(32, 32, 32), seed=3)
        vol = normalize_intensities(vol)
        cfg = TrainConfig(variant="unet3d", depth=3, base_channels=8,
                          patch_size=(32, 32, 32), batch_size=1,
                          max_epochs=300, validation_interval=100,
                          optimizer=OptimizerConfig(learning_rate=3e-3),
                          seed=11)
        result = fit_model(cfg, [(vol, lm)])
        gt = labels_to_regions(lm, DEFAULT_REGION_MAPPING)
        scores = validate(result.handle, [(vol, gt)], threshold=0.5,
                          patch_size=(32, 32, 32))
        elapsed = time.monotonic() - start
        steps = len([r for r in result.history if "loss" in r])
        ok = all(v >= 0.90 for v in scores.values()) and elapsed < 300.0
        record("training-overfit-sanity", ok,
               f"{steps} steps, {elapsed:.0f}s, dice " +
               ", ".join(f"{k}={v:.3f}" for k, v in scores.items()))


class TestPostprocessCriteria:
    def test_nesting_over_random_triples(self):
        """postprocess_case output nested on 10^4 random triples."""
        rng = np.random.default_rng(606)
        cfg = PostprocConfig(min_component_size=3)
        ok = True
        for _ in range(10_000):
            raw = RegionMaskSet(et=rng.random((6, 6, 6)) < 0.35,
                                tc=rng.random((6, 6, 6)) < 0.35,
                                wt=rng.random((6, 6, 6)) < 0.35)
            ok &= postprocess_case(raw, cfg).is_nested()
        record("postprocess-nesting", ok, "10000 random triples")

    def test_size_filter_flood_fill_oracle(self):
        rng = np.random.default_rng(607)
        ok = True
        for _ in range(200):
            mask = rng.random((7, 7, 7)) < 0.3
            threshold = int(rng.integers(1, 10))
            connectivity = int(rng.choice([6, 18, 26]))
            ours = size_filter(mask, threshold, connectivity)
            ref = oracles.size_filter_loop(mask, threshold, connectivity)
            ok &= bool(np.array_equal(ours, ref))
        record("postprocess-size-filter-oracle", ok, "200 random masks")

    def test_pipeline_idempotence(self):
        cfg = PostprocConfig()  # default: threshold 50, box radius 1
        rng = np.random.default_rng(608)
        ok = True
        for _ in range(500):
            raw = RegionMaskSet(et=rng.random((10, 10, 10)) < rng.uniform(0.1, 0.6),
                                tc=rng.random((10, 10, 10)) < rng.uniform(0.1, 0.6),
                                wt=rng.random((10, 10, 10)) < rng.uniform(0.1, 0.6))
            once = postprocess_case(raw, cfg)
            twice = postprocess_case(once, cfg)
            for name in ("et", "tc", "wt"):
                ok &= bool(np.array_equal(once.region(name), twice.region(name)))
        record("postprocess-idempotence", ok, "500 random triples, default config")


class TestDeterminismCriterion:
    def test_training_and_prediction_reproducible(self, tmp_path):
        """Same config+seed: equal loss curves and byte-identical outputs."""
        vol, lm = make_phantom("det_case", shape=(16, 16, 16), seed=21)
        vol = normalize_intensities(vol)
        cfg = TrainConfig(variant="unet3d", depth=3, base_channels=4,
                          patch_size=(16, 16, 16), max_epochs=4,
                          validation_interval=4,
                          optimizer=OptimizerConfig(learning_rate=1e-3),
                          seed=5)
        r1 = fit_model(cfg, [(vol, lm)])
        r2 = fit_model(cfg, [(vol, lm)])
        curves_equal = (
            [r["loss"] for r in r1.history if "loss" in r]
            == [r["loss"] for r in r2.history if "loss" in r]
        )

        from pedseg.inference import predict_logits
        from pedseg import nifti
        a = predict_logits(r1.handle, vol, (16, 16, 16))
        b = predict_logits(r2.handle, vol, (16, 16, 16))
        logits_equal = np.array_equal(a.data, b.data)

        mask = a.data[2] > 0
        p1 = tmp_path / "m1.nii.gz"
        p2 = tmp_path / "m2.nii.gz"
        nifti.write_nifti(p1, mask.astype(np.uint8))
        nifti.write_nifti(p2, mask.astype(np.uint8))
        files_equal = p1.read_bytes() == p2.read_bytes()
        record("determinism", curves_equal and logits_equal and files_equal,
               "loss curves, logits, mask files")


class TestGoldenWorkflow:
    def test_full_chain_reproduces_golden_reports(self, tmp_path):
        """train x3 -> ensemble -> postprocess -> evaluate, byte-identical."""
        start = time.monotonic()
        artifacts = run_chain(tmp_path)
        elapsed = time.monotonic() - start
        csv_ok = (artifacts["report_csv"].read_bytes()
                  == (GOLDEN_DIR / "report.csv").read_bytes())
        json_ok = (artifacts["aggregate_json"].read_bytes()
                   == (GOLDEN_DIR / "aggregate.json").read_bytes())
        md_ok = artifacts["report_md"].exists()
        record("golden-workflow",
               csv_ok and json_ok and md_ok and elapsed < 900.0,
               f"{elapsed:.0f}s < 900s, reports byte-identical: "
               f"csv={csv_ok} json={json_ok}")
