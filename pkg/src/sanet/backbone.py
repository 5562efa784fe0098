"""Mini ResNeXt-style dilated backbone exposing taps s0..s4.

Layout with an H x W input and the default stage plan::

    stem 3x3/2 -> norm -> relu            s0  (H/2)
    3x3/2 downsample -> norm -> relu          (H/4)
    stage 1, stride 1                     s1  (H/4)
    stage 2, stride 2                     s2  (H/8)
    stage 3, stride 1, dilation 2         s3  (H/8)
    stage 4, stride 1, dilation 4         s4  (H/8) = final
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .ops import conv2d, group_norm
from .tensor import SeededRng, ShapeError, Tensor, add, alloc, he_init, relu


@dataclass
class StageConfig:
    blocks: int
    channels: int
    cardinality: int = 8
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("a stage needs at least one block")
        if self.stride not in (1, 2):
            raise ValueError(f"stage stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.dilation > 1 and self.stride != 1:
            raise ValueError("dilation > 1 requires stride 1")
        if self.channels % self.cardinality or self.width % self.cardinality:
            raise ShapeError(f"stage width {self.width} (channels {self.channels}) "
                             f"not divisible by cardinality {self.cardinality}")

    @property
    def width(self) -> int:
        """Bottleneck width (channels of the grouped 3x3)."""
        return self.channels // 2


def default_stages(channels=(32, 64, 128, 256), blocks=(2, 2, 2, 2), cardinality: int = 8,
                   strides=(1, 2, 1, 1), dilations=(1, 1, 2, 4)) -> list[StageConfig]:
    return [StageConfig(b, c, cardinality, s, d) for b, c, s, d in zip(blocks, channels, strides, dilations)]


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    stages: list[StageConfig] = field(default_factory=default_stages)
    norm: str = "group"
    gn_group_channels: int = 8

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError("backbone needs exactly four stages")
        if self.norm not in ("group", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def output_stride(self) -> int:
        os_ = 4
        for st in self.stages:
            os_ *= st.stride
        return os_

    def tap_channels(self) -> dict[str, int]:
        chans = {"s0": self.stem_channels}
        for k, st in enumerate(self.stages, start=1):
            chans[f"s{k}"] = st.channels
        return chans

    def tap_strides(self) -> dict[str, int]:
        strides = {"s0": 2}
        s = 4
        for k, st in enumerate(self.stages, start=1):
            s *= st.stride
            strides[f"s{k}"] = s
        return strides


def norm_groups(channels: int, group_channels: int) -> int:
    groups = max(1, channels // group_channels)
    while channels % groups:
        groups -= 1
    return groups


@dataclass
class ConvUnit:
    """Bias-free convolution followed by optional group normalization."""

    kernel: Tensor
    scale: Optional[Tensor]
    shift: Optional[Tensor]
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    norm_groups: int = 1

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int, rng: SeededRng, *, stride: int = 1, dilation: int = 1,
               groups: int = 1, norm: str = "group", group_channels: int = 8) -> "ConvUnit":
        kernel = he_init((c_out, c_in // groups, k, k), (c_in // groups) * k * k, rng)
        kernel.requires_grad = True
        scale = shift = None
        if norm == "group":
            scale = alloc((c_out,), 1.0)
            shift = alloc((c_out,), 0.0)
            scale.requires_grad = shift.requires_grad = True
        padding = dilation * (k - 1) // 2
        return cls(kernel, scale, shift, stride, padding, dilation, groups, norm_groups(c_out, group_channels))

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, None, self.stride, self.padding, self.dilation, self.groups)
        if self.scale is not None:
            y = group_norm(y, self.norm_groups, self.scale, self.shift)
        return y

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.kernel}
        if self.scale is not None:
            params["norm.scale"] = self.scale
            params["norm.shift"] = self.shift
        return params


@dataclass
class Bottleneck:
    reduce: ConvUnit
    grouped: ConvUnit
    expand: ConvUnit
    shortcut: Optional[ConvUnit]

    @classmethod
    def create(cls, c_in: int, stage: StageConfig, stride: int, rng: SeededRng, norm: str,
               group_channels: int) -> "Bottleneck":
        width, c_out = stage.width, stage.channels
        kw = dict(norm=norm, group_channels=group_channels)
        reduce = ConvUnit.create(c_in, width, 1, rng.child(0), **kw)
        grouped = ConvUnit.create(width, width, 3, rng.child(1), stride=stride, dilation=stage.dilation,
                                  groups=stage.cardinality, **kw)
        expand = ConvUnit.create(width, c_out, 1, rng.child(2), **kw)
        shortcut = None
        if c_in != c_out or stride != 1:
            shortcut = ConvUnit.create(c_in, c_out, 1, rng.child(3), stride=stride, **kw)
        return cls(reduce, grouped, expand, shortcut)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name in ("reduce", "grouped", "expand", "shortcut"):
            unit = getattr(self, name)
            if unit is not None:
                params.update({f"{name}.{k}": v for k, v in unit.parameters().items()})
        return params


def bottleneck_forward(x: Tensor, block: Bottleneck) -> Tensor:
    """ReLU(expand(grouped(reduce(x))) + shortcut(x))."""
    expected = block.reduce.kernel.shape[1]
    if x.shape[1] != expected:
        raise ShapeError(f"block expects {expected} input channels, got {x.shape[1]}")
    y = relu(block.reduce(x))
    y = relu(block.grouped(y))
    y = block.expand(y)
    skip = block.shortcut(x) if block.shortcut is not None else x
    return relu(add(y, skip))


@dataclass
class BackboneOutput:
    taps: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.taps[-1]


class Backbone:
    def __init__(self, config: BackboneConfig, rng: SeededRng):
        self.config = config
        kw = dict(norm=config.norm, group_channels=config.gn_group_channels)
        c = config.stem_channels
        self.stem = ConvUnit.create(3, c, 3, rng.child(0), stride=2, **kw)
        self.down = ConvUnit.create(c, c, 3, rng.child(1), stride=2, **kw)
        self.stages: list[list[Bottleneck]] = []
        c_in = c
        for si, st in enumerate(config.stages):
            blocks = []
            for bi in range(st.blocks):
                stride = st.stride if bi == 0 else 1
                blocks.append(Bottleneck.create(c_in, st, stride, rng.child(2 + si, bi),
                                                config.norm, config.gn_group_channels))
                c_in = st.channels
            self.stages.append(blocks)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"stem.{k}": v for k, v in self.stem.parameters().items()}
        params.update({f"down.{k}": v for k, v in self.down.parameters().items()})
        for si, blocks in enumerate(self.stages, start=1):
            for bi, block in enumerate(blocks):
                params.update({f"stage{si}.{bi}.{k}": v for k, v in block.parameters().items()})
        return params

    def __call__(self, image: Tensor) -> BackboneOutput:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> BackboneOutput:
    """Run the stem and the four stages, collecting the five taps."""
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects (n, 3, H, W) images, got {image.shape}")
    os_ = backbone.config.output_stride
    h, w = image.shape[2], image.shape[3]
    if h % os_ or w % os_:
        raise ValueError(f"input extents {h}x{w} must be divisible by the output stride {os_}")
    x = relu(backbone.stem(image))
    taps = [x]
    x = relu(backbone.down(x))
    for blocks in backbone.stages:
        for block in blocks:
            x = bottleneck_forward(x, block)
        taps.append(x)
    return BackboneOutput(taps)
