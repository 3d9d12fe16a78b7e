import numpy as np
import pytest
import torch

from pedseg.errors import (
    IndivisibleShapeError,
    InvalidSpecError,
    UnknownVariantError,
)
from pedseg.models import (
    VARIANT_NAMES,
    ArchitectureSpec,
    build_model,
    forward,
    model_from_state,
    model_state,
    spec_for_variant,
)

SMALL = dict(depth=3, base_channels=4)  # desk-scale shrink, variant-preserving


# ---------------------------------------------------------------------------
# Closed-form parameter count, written independently of the torch modules.
# Convs followed by instance norm are bias-free; the norm is affine (2c);
# upsampling is a bias-free 2x2x2 stride-2 transposed conv; the head is a
# biased 1x1x1 conv.
# ---------------------------------------------------------------------------


def conv_params(cin, cout, k):
    return k**3 * cin * cout


def block_params(cin, cout, convs, k):
    total = 0
    for j in range(convs):
        total += conv_params(cin if j == 0 else cout, cout, k) + 2 * cout
    return total


def gate_params(c):
    inter = max(c // 2, 1)
    per_branch = conv_params(c, inter, 1) + 2 * inter
    return 2 * per_branch + conv_params(inter, 1, 1) + 2


def expected_parameter_count(spec: ArchitectureSpec) -> int:
    ch = [spec.base_channels * 2**i for i in range(spec.depth)]
    total = block_params(spec.in_channels, ch[0], spec.convs_per_block, spec.kernel_size)
    for i in range(1, spec.depth):
        total += block_params(ch[i - 1], ch[i], spec.convs_per_block, spec.kernel_size)
    for i in range(spec.depth - 2, -1, -1):
        total += 8 * ch[i + 1] * ch[i]  # transposed conv, no bias
        total += block_params(2 * ch[i], ch[i], spec.convs_per_block, spec.kernel_size)
        if spec.attention_gates:
            total += gate_params(ch[i])
    head_in = sum(ch) + ch[0] if spec.family == "onet3d" else ch[0]
    total += head_in * spec.out_channels + spec.out_channels
    return total


class TestVariantSpecs:
    def test_canonical_unet3d(self):
        spec = spec_for_variant("unet3d")
        assert spec.family == "unet3d"
        assert spec.in_channels == 4
        assert spec.out_channels == 3
        assert spec.base_channels == 32
        assert spec.convs_per_block == 2
        assert spec.kernel_size == 3
        assert spec.activation == "relu"

    def test_variant_differences(self):
        assert spec_for_variant("unet3d_gelu").activation == "gelu"
        assert spec_for_variant("unet3d_singleconv").convs_per_block == 1
        assert spec_for_variant("unet3d_attention").attention_gates is True
        assert spec_for_variant("unet3d_dropout").dropout_rate > 0
        k5 = spec_for_variant("onet3d_singleconv_k5")
        assert (k5.family, k5.kernel_size, k5.convs_per_block) == ("onet3d", 5, 1)
        k1 = spec_for_variant("onet3d_singleconv_k1")
        assert (k1.kernel_size, k1.convs_per_block) == (1, 1)
        d1 = spec_for_variant("onet3d_doubleconv_k1")
        assert (d1.kernel_size, d1.convs_per_block) == (1, 2)

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariantError):
            spec_for_variant("resnet50")

    def test_spec_invariants(self):
        with pytest.raises(InvalidSpecError):
            ArchitectureSpec(kernel_size=2)
        with pytest.raises(InvalidSpecError):
            ArchitectureSpec(convs_per_block=3)
        with pytest.raises(InvalidSpecError):
            ArchitectureSpec(family="vnet")
        with pytest.raises(InvalidSpecError):
            ArchitectureSpec(dropout_rate=1.0)


class TestParameterCounts:
    @pytest.mark.parametrize("name", VARIANT_NAMES)
    def test_small_scale_matches_closed_form(self, name):
        spec = spec_for_variant(name, **SMALL)
        handle = build_model(spec, init_seed=1)
        assert handle.parameter_count == expected_parameter_count(spec)

    @pytest.mark.parametrize("name", ["unet3d", "onet3d_doubleconv_k1"])
    def test_canonical_scale_matches_closed_form(self, name):
        spec = spec_for_variant(name)
        handle = build_model(spec, init_seed=1)
        assert handle.parameter_count == expected_parameter_count(spec)

    def test_gelu_and_relu_counts_equal(self):
        a = build_model(spec_for_variant("unet3d", **SMALL)).parameter_count
        b = build_model(spec_for_variant("unet3d_gelu", **SMALL)).parameter_count
        assert a == b

    def test_singleconv_strictly_smaller(self):
        double = build_model(spec_for_variant("unet3d", **SMALL)).parameter_count
        single = build_model(spec_for_variant("unet3d_singleconv", **SMALL)).parameter_count
        assert single < double

    def test_dropout_adds_no_parameters(self):
        a = build_model(spec_for_variant("unet3d", **SMALL)).parameter_count
        b = build_model(spec_for_variant("unet3d_dropout", **SMALL)).parameter_count
        assert a == b


class TestConstruction:
    def test_same_seed_identical_parameters(self):
        spec = spec_for_variant("unet3d", **SMALL)
        h1 = build_model(spec, init_seed=7)
        h2 = build_model(spec, init_seed=7)
        for p1, p2 in zip(h1.module.parameters(), h2.module.parameters()):
            assert torch.equal(p1, p2)

    def test_different_seed_differs(self):
        spec = spec_for_variant("unet3d", **SMALL)
        h1 = build_model(spec, init_seed=7)
        h2 = build_model(spec, init_seed=8)
        assert any(
            not torch.equal(p1, p2)
            for p1, p2 in zip(h1.module.parameters(), h2.module.parameters())
        )

    def test_onet_head_strictly_wider_than_unet(self):
        unet = build_model(spec_for_variant("unet3d", **SMALL))
        onet = build_model(
            spec_for_variant("onet3d_doubleconv_k1", **SMALL, kernel_size=3)
        )
        assert onet.module.head.in_channels > unet.module.head.in_channels

    def test_state_round_trip(self):
        handle = build_model(spec_for_variant("unet3d", **SMALL), init_seed=3)
        handle.trained_steps = 11
        restored = model_from_state(model_state(handle))
        assert restored.spec == handle.spec
        assert restored.trained_steps == 11
        for p1, p2 in zip(handle.module.parameters(), restored.module.parameters()):
            assert torch.equal(p1, p2)


class TestForward:
    @pytest.mark.parametrize("name", VARIANT_NAMES)
    def test_shape_contract_all_variants(self, name):
        handle = build_model(spec_for_variant(name, **SMALL), init_seed=0)
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        random_valid = tuple(4 * int(rng.integers(3, 9)) for _ in range(3))
        for shape in [(16, 16, 16), (16, 24, 32), random_valid]:
            x = rng.standard_normal((4, *shape)).astype(np.float32)
            logits = forward(handle, x)
            assert logits.shape == (3, *shape)
            assert np.isfinite(logits).all()

    def test_indivisible_shape_rejected(self):
        handle = build_model(spec_for_variant("unet3d", depth=4, base_channels=4))
        x = np.zeros((4, 33, 32, 32), dtype=np.float32)
        with pytest.raises(IndivisibleShapeError):
            forward(handle, x)

    def test_dropout_eval_mode_deterministic(self):
        handle = build_model(spec_for_variant("unet3d_dropout", **SMALL), init_seed=2)
        x = np.random.default_rng(1).standard_normal((4, 16, 16, 16)).astype(np.float32)
        a = forward(handle, x, train_mode=False)
        b = forward(handle, x, train_mode=False)
        assert np.array_equal(a, b)

    def test_dropout_active_in_train_mode(self):
        handle = build_model(spec_for_variant("unet3d_dropout", **SMALL), init_seed=2)
        x = np.random.default_rng(1).standard_normal((4, 16, 16, 16)).astype(np.float32)
        torch.manual_seed(0)
        a = forward(handle, x, train_mode=True)
        b = forward(handle, x, train_mode=True)
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("name", VARIANT_NAMES)
    def test_gradient_reaches_every_parameter(self, name):
        handle = build_model(spec_for_variant(name, **SMALL), init_seed=4)
        handle.module.train(False)
        torch.manual_seed(5)
        x = torch.randn(1, 4, 16, 16, 16)
        out = handle.module(x)
        out.mean().backward()
        for pname, p in handle.module.named_parameters():
            assert p.grad is not None, f"{name}: no grad for {pname}"
            assert p.grad.abs().max() > 0, f"{name}: zero grad for {pname}"
