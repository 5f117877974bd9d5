"""MBConv feature extractor with compound width/depth scaling.

The default configuration is a small analogue of EfficientNet-B0: the same
stem -> MBConv stages -> 1x1 head -> pooled descriptor topology, with the
k3/k5 kernel mix, expand-then-project blocks and identity skips, but few
enough channels to train on a laptop CPU.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ContractViolation
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    kernel: int
    stride: int
    expand: int
    channels: int
    layers: int

    def __post_init__(self):
        if self.kernel not in (3, 5):
            raise ContractViolation(f"kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ContractViolation(f"stride must be 1 or 2, got {self.stride}")
        if self.expand < 1 or self.channels <= 0 or self.layers < 1:
            raise ContractViolation(f"invalid stage {self}")

    def encode(self) -> str:
        return f"k{self.kernel}s{self.stride}e{self.expand}c{self.channels}n{self.layers}"

    @classmethod
    def decode(cls, text: str) -> "StageSpec":
        import re

        m = re.fullmatch(r"k(\d+)s(\d+)e(\d+)c(\d+)n(\d+)", text.strip())
        if m is None:
            raise ContractViolation(f"cannot parse stage spec {text!r} (expected e.g. k3s2e4c24n2)")
        return cls(*(int(v) for v in m.groups()))


MICRO_STAGES = (
    StageSpec(3, 1, 1, 16, 1),
    StageSpec(3, 2, 4, 24, 2),
    StageSpec(5, 2, 4, 40, 2),
    StageSpec(3, 2, 4, 64, 2),
)

# EfficientNet-B0 stage table (squeeze-excitation not modelled).
B0_STAGES = (
    StageSpec(3, 1, 1, 16, 1),
    StageSpec(3, 2, 6, 24, 2),
    StageSpec(5, 2, 6, 40, 2),
    StageSpec(3, 2, 6, 80, 3),
    StageSpec(5, 1, 6, 112, 3),
    StageSpec(5, 2, 6, 192, 4),
    StageSpec(3, 1, 6, 320, 1),
)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = MICRO_STAGES
    head_channels: int = 128
    descriptor_dim: int = 64
    width_mult: float = 1.0
    depth_mult: float = 1.0
    height: int = 160
    width: int = 80
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.descriptor_dim <= 0 or self.stem_channels <= 0 or self.head_channels <= 0:
            raise ContractViolation("channel counts and descriptor_dim must be positive")
        if not self.stages:
            raise ContractViolation("at least one stage is required")
        if self.height <= 0 or self.width <= 0:
            raise ContractViolation(f"invalid resolution {self.height}x{self.width}")

    @property
    def conv_layer_count(self) -> int:
        """Stem + one per MBConv block + head, the way EfficientNet-B0 counts to 18."""
        return 2 + sum(s.layers for s in self.stages)


def micro_config(**overrides) -> BackboneConfig:
    return BackboneConfig(**overrides)


def b0_reference_config() -> BackboneConfig:
    return BackboneConfig(
        stem_channels=32, stages=B0_STAGES, head_channels=1280, descriptor_dim=1280, height=224, width=224
    )


def round_channels(channels: float) -> int:
    """Nearest multiple of 8, bumped up if rounding lost more than 10%."""
    rounded = max(8, int(channels + 4) // 8 * 8)
    if rounded < 0.9 * channels:
        rounded += 8
    return rounded


def scale_config(base: BackboneConfig, width_mult: float, depth_mult: float) -> BackboneConfig:
    if width_mult <= 0 or depth_mult <= 0:
        raise ContractViolation(f"multipliers must be positive, got {width_mult}, {depth_mult}")

    def width(c: int) -> int:
        return c if width_mult == 1.0 else round_channels(c * width_mult)

    def depth(n: int) -> int:
        return n if depth_mult == 1.0 else int(math.ceil(n * depth_mult))

    stages = tuple(dataclasses.replace(s, channels=width(s.channels), layers=depth(s.layers)) for s in base.stages)
    return dataclasses.replace(
        base,
        stem_channels=width(base.stem_channels),
        head_channels=width(base.head_channels),
        stages=stages,
        width_mult=base.width_mult * width_mult,
        depth_mult=base.depth_mult * depth_mult,
    )


@dataclass(frozen=True)
class BlockSpec:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    expand: int

    @property
    def hidden(self) -> int:
        return self.cin * self.expand

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.cin == self.cout


def block_specs(config: BackboneConfig) -> list[BlockSpec]:
    blocks = []
    cin = config.stem_channels
    for si, stage in enumerate(config.stages):
        for li in range(stage.layers):
            stride = stage.stride if li == 0 else 1
            blocks.append(BlockSpec(f"blocks.{si}.{li}", cin, stage.channels, stage.kernel, stride, stage.expand))
            cin = stage.channels
    return blocks


def parameter_shapes(config: BackboneConfig) -> dict[str, tuple[tuple[int, ...], bool]]:
    """name -> (shape, trainable) for every tensor the config implies."""
    shapes: dict[str, tuple[tuple[int, ...], bool]] = {}

    def bn(prefix: str, c: int) -> None:
        shapes[f"{prefix}.gamma"] = ((c,), True)
        shapes[f"{prefix}.beta"] = ((c,), True)
        shapes[f"{prefix}.running_mean"] = ((c,), False)
        shapes[f"{prefix}.running_var"] = ((c,), False)

    shapes["stem.conv.weight"] = ((config.stem_channels, 3, 3, 3), True)
    bn("stem.bn", config.stem_channels)
    for b in block_specs(config):
        if b.expand != 1:
            shapes[f"{b.name}.expand.weight"] = ((b.hidden, b.cin, 1, 1), True)
            bn(f"{b.name}.expand_bn", b.hidden)
        shapes[f"{b.name}.dw.weight"] = ((b.hidden, 1, b.kernel, b.kernel), True)
        bn(f"{b.name}.dw_bn", b.hidden)
        shapes[f"{b.name}.project.weight"] = ((b.cout, b.hidden, 1, 1), True)
        bn(f"{b.name}.project_bn", b.cout)
    last = config.stages[-1].channels
    shapes["top.conv.weight"] = ((config.head_channels, last, 1, 1), True)
    bn("top.bn", config.head_channels)
    shapes["embed.weight"] = ((config.descriptor_dim, config.head_channels), True)
    shapes["embed.bias"] = ((config.descriptor_dim,), True)
    return shapes


@dataclass
class ModelParams:
    """Named backbone tensors, iterated in lexicographic name order."""

    config: BackboneConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: self.tensors[k] for k in sorted(self.tensors)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad or not trainable_only)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()}
        )


def build_model(config: BackboneConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled normal convolutions, unit/zero batch-norm affine terms."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, trainable) in parameter_shapes(config).items():
        if name.endswith(("gamma", "running_var")):
            data = np.ones(shape)
        elif name.endswith(("beta", "running_mean", "bias")):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("embed") else 2.0
            data = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=trainable)
    return ModelParams(config, tensors)


def _bn(params: ModelParams, prefix: str, x: Tensor, training: bool) -> Tensor:
    cfg = params.config
    return ops.batch_norm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"],
        params[f"{prefix}.running_var"],
        training=training,
        momentum=cfg.bn_momentum,
        eps=cfg.bn_eps,
    )


def mbconv_forward(params: ModelParams, block: BlockSpec, x: Tensor, training: bool = False) -> Tensor:
    """Expand (1x1) -> depthwise -> project (1x1), identity skip when shapes allow."""
    if x.ndim != 4 or x.shape[1] != block.cin:
        raise ContractViolation(f"{block.name} expects {block.cin} input channels, got input {x.shape}")
    h = x
    if block.expand != 1:
        h = ops.conv2d(h, params[f"{block.name}.expand.weight"])
        h = ops.swish(_bn(params, f"{block.name}.expand_bn", h, training))
    h = ops.depthwise_conv2d(h, params[f"{block.name}.dw.weight"], stride=block.stride, padding=block.kernel // 2)
    h = ops.swish(_bn(params, f"{block.name}.dw_bn", h, training))
    h = ops.conv2d(h, params[f"{block.name}.project.weight"])
    h = _bn(params, f"{block.name}.project_bn", h, training)
    if block.has_skip:
        h = h + x
    return h


def forward_features(params: ModelParams, images: Tensor, training: bool = False) -> Tensor:
    """N x 3 x H x W images -> N x D descriptors."""
    cfg = params.config
    if not isinstance(images, Tensor):
        images = Tensor(images)
    expected = (3, cfg.height, cfg.width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ContractViolation(f"expected images of shape N x {' x '.join(map(str, expected))}, got {images.shape}")
    h = ops.conv2d(images, params["stem.conv.weight"], stride=2, padding=1)
    h = ops.swish(_bn(params, "stem.bn", h, training))
    for block in block_specs(cfg):
        h = mbconv_forward(params, block, h, training)
    h = ops.conv2d(h, params["top.conv.weight"])
    h = ops.swish(_bn(params, "top.bn", h, training))
    h = ops.global_avg_pool(h)
    return ops.linear(h, params["embed.weight"], params["embed.bias"])
