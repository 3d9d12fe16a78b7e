"""Declarative construction of the UNet3D and ONet3D variant families.

Both families share a 3D encoder-decoder trunk: ``depth`` encoder levels
doubling channels from ``base_channels`` with x2 max-pool downsampling,
a mirrored decoder with transposed-conv upsampling and skip connections,
instance normalization after every convolution, and a 1x1x1 output head
producing 3 region logits. The ONet family additionally upsamples every
encoder level back to full resolution and concatenates that stack with
the final decoder feature map right before the output head, so its head
sees a strictly wider input than the UNet's.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IndivisibleShapeError, InvalidSpecError, UnknownVariantError

FAMILIES = ("unet3d", "onet3d")
ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hyperparameters that fully determine one model variant."""

    family: str = "unet3d"
    in_channels: int = 4
    out_channels: int = 3
    base_channels: int = 32
    depth: int = 4
    convs_per_block: int = 2
    kernel_size: int = 3
    activation: str = "relu"
    attention_gates: bool = False
    dropout_rate: float = 0.0
    variant_name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpecError(f"unknown family {self.family!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")
        if self.convs_per_block not in (1, 2):
            raise InvalidSpecError("convs_per_block must be 1 or 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidSpecError("kernel_size must be odd and >= 1")
        if self.depth < 2:
            raise InvalidSpecError("depth must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpecError("dropout_rate must be in [0, 1)")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise InvalidSpecError("channel counts must be positive")

    @property
    def level_channels(self):
        return [self.base_channels * 2**i for i in range(self.depth)]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.depth - 1)


VARIANT_NAMES = (
    "unet3d",
    "unet3d_gelu",
    "unet3d_singleconv",
    "unet3d_attention",
    "unet3d_dropout",
    "onet3d_singleconv_k1",
    "onet3d_singleconv_k5",
    "onet3d_doubleconv_k1",
)

_VARIANT_OVERRIDES = {
    "unet3d": {},
    "unet3d_gelu": {"activation": "gelu"},
    "unet3d_singleconv": {"convs_per_block": 1},
    "unet3d_attention": {"attention_gates": True},
    "unet3d_dropout": {"dropout_rate": 0.2},
    "onet3d_singleconv_k1": {"family": "onet3d", "convs_per_block": 1, "kernel_size": 1},
    "onet3d_singleconv_k5": {"family": "onet3d", "convs_per_block": 1, "kernel_size": 5},
    "onet3d_doubleconv_k1": {"family": "onet3d", "convs_per_block": 2, "kernel_size": 1},
}


def spec_for_variant(name: str, **overrides) -> ArchitectureSpec:
    """Canonical spec for one of the eight published variant names.

    Keyword overrides (e.g. ``depth=3, base_channels=8``) shrink a variant
    for desk-scale runs without changing what makes it that variant.
    """
    if name not in _VARIANT_OVERRIDES:
        raise UnknownVariantError(
            f"unknown variant {name!r}; expected one of {VARIANT_NAMES}"
        )
    spec = ArchitectureSpec(variant_name=name, **_VARIANT_OVERRIDES[name])
    return replace(spec, **overrides) if overrides else spec


def _make_activation(name: str) -> nn.Module:
    return nn.ReLU(inplace=True) if name == "relu" else nn.GELU()


class ConvBlock(nn.Module):
    """(Conv3d -> InstanceNorm -> activation) x convs_per_block.

    Convolutions are bias-free: the following instance norm would cancel
    any bias exactly, leaving a dead parameter.
    """

    def __init__(self, cin, cout, convs, kernel_size, activation):
        super().__init__()
        layers = []
        for j in range(convs):
            layers += [
                nn.Conv3d(cin if j == 0 else cout, cout, kernel_size,
                          padding=kernel_size // 2, bias=False),
                nn.InstanceNorm3d(cout, affine=True),
                _make_activation(activation),
            ]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class AttentionGate(nn.Module):
    """Additive attention on a skip connection, gated by the decoder path."""

    def __init__(self, channels):
        super().__init__()
        inter = max(channels // 2, 1)
        self.gate = nn.Sequential(
            nn.Conv3d(channels, inter, 1, bias=False),
            nn.InstanceNorm3d(inter, affine=True),
        )
        self.skip = nn.Sequential(
            nn.Conv3d(channels, inter, 1, bias=False),
            nn.InstanceNorm3d(inter, affine=True),
        )
        self.psi = nn.Sequential(
            nn.Conv3d(inter, 1, 1, bias=False),
            nn.InstanceNorm3d(1, affine=True),
            nn.Sigmoid(),
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, g, x):
        attention = self.psi(self.act(self.gate(g) + self.skip(x)))
        return x * attention


class SegmentationNet(nn.Module):
    """Encoder-decoder trunk realizing both families from a spec."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        ch = spec.level_channels

        self.encoders = nn.ModuleList()
        for i in range(spec.depth):
            cin = spec.in_channels if i == 0 else ch[i - 1]
            self.encoders.append(
                ConvBlock(cin, ch[i], spec.convs_per_block, spec.kernel_size,
                          spec.activation)
            )
        self.pool = nn.MaxPool3d(2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.gates = nn.ModuleList() if spec.attention_gates else None
        for i in range(spec.depth - 2, -1, -1):
            self.upsamplers.append(
                nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2, bias=False)
            )
            self.decoders.append(
                ConvBlock(2 * ch[i], ch[i], spec.convs_per_block, spec.kernel_size,
                          spec.activation)
            )
            if self.gates is not None:
                self.gates.append(AttentionGate(ch[i]))

        self.dropout = (
            nn.Dropout3d(spec.dropout_rate) if spec.dropout_rate > 0 else None
        )
        head_in = sum(ch) + ch[0] if spec.family == "onet3d" else ch[0]
        self.head = nn.Conv3d(head_in, spec.out_channels, 1)

    def _drop(self, x):
        return self.dropout(x) if self.dropout is not None else x

    def forward(self, x):
        feats = []
        h = x
        for i, encoder in enumerate(self.encoders):
            h = self._drop(encoder(h))
            feats.append(h)
            if i < self.spec.depth - 1:
                h = self.pool(h)

        d = feats[-1]
        for j, (up, decoder) in enumerate(zip(self.upsamplers, self.decoders)):
            level = self.spec.depth - 2 - j
            d = up(d)
            skip = feats[level]
            if self.gates is not None:
                skip = self.gates[j](d, skip)
            d = self._drop(decoder(torch.cat([skip, d], dim=1)))

        if self.spec.family == "onet3d":
            stack = [feats[0]]
            for i in range(1, self.spec.depth):
                stack.append(
                    F.interpolate(feats[i], scale_factor=2**i, mode="trilinear",
                                  align_corners=False)
                )
            d = torch.cat(stack + [d], dim=1)
        return self.head(d)


@dataclass
class ModelHandle:
    """A constructed network plus its spec and bookkeeping."""

    spec: ArchitectureSpec
    module: nn.Module
    parameter_count: int
    trained_steps: int = 0

    @property
    def is_trained(self) -> bool:
        return self.trained_steps > 0


def build_model(spec: ArchitectureSpec, init_seed: int = 0) -> ModelHandle:
    """Construct a variant with deterministic initialization."""
    generator_state = torch.get_rng_state()
    try:
        torch.manual_seed(init_seed)
        module = SegmentationNet(spec)
    finally:
        torch.set_rng_state(generator_state)
    count = sum(p.numel() for p in module.parameters())
    return ModelHandle(spec=spec, module=module, parameter_count=count)


def check_divisible(shape, spec: ArchitectureSpec):
    factor = spec.downsample_factor
    if any(s % factor for s in shape):
        raise IndivisibleShapeError(
            f"spatial shape {tuple(shape)} must be divisible by {factor} "
            f"(depth {spec.depth})"
        )


def forward(handle: ModelHandle, volume, train_mode: bool = False) -> np.ndarray:
    """Run one full-volume forward pass; returns (3, X, Y, Z) logits.

    ``volume`` may be a MultiModalVolume or a (4, X, Y, Z) array. Dropout
    is active only when ``train_mode`` is set.
    """
    data = getattr(volume, "data", volume)
    data = np.asarray(data, dtype=np.float32)
    check_divisible(data.shape[1:], handle.spec)
    handle.module.train(train_mode)
    x = torch.from_numpy(data).unsqueeze(0)
    if train_mode:
        logits = handle.module(x)
    else:
        with torch.no_grad():
            logits = handle.module(x)
    handle.module.eval()
    return logits.squeeze(0).detach().numpy()


def model_state(handle: ModelHandle) -> dict:
    """Serializable snapshot: spec, weights, training step counter."""
    buffer = io.BytesIO()
    torch.save(handle.module.state_dict(), buffer)
    return {
        "spec": asdict(handle.spec),
        "weights": buffer.getvalue(),
        "trained_steps": handle.trained_steps,
    }


def model_from_state(state: dict) -> ModelHandle:
    spec = ArchitectureSpec(**state["spec"])
    handle = build_model(spec)
    handle.module.load_state_dict(
        torch.load(io.BytesIO(state["weights"]), weights_only=True)
    )
    handle.trained_steps = int(state.get("trained_steps", 0))
    return handle
