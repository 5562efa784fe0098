"""Multiply-accumulate, parameter and activation accounting by shape propagation.

Only convolutions contribute MACs; normalization, activations, resizing and
pooling are recorded with zero MACs but take part in the activation-memory
estimate.  FLOPs are reported as 2 x MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .backbone import BackboneConfig
from .config import ModelConfig
from .head import clamp_bins, fused_channels, psp_channels


class FlopsConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    name: str
    c_out: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = False


@dataclass
class LayerCount:
    name: str
    kind: str
    out_shape: tuple[int, int, int]
    macs: int
    params: int


@dataclass
class FlopsReport:
    layers: list[LayerCount] = field(default_factory=list)
    peak_activation: int = 0

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    def table(self) -> str:
        rows = [f"{'layer':<44} {'kind':<10} {'output':>16} {'MACs':>14} {'params':>10}"]
        for l in self.layers:
            shape = "x".join(str(s) for s in l.out_shape)
            rows.append(f"{l.name:<44} {l.kind:<10} {shape:>16} {l.macs:>14,d} {l.params:>10,d}")
        rows.append(f"total MACs {self.total_macs:,d}  FLOPs (2 per MAC) {self.total_flops:,d}  "
                    f"params {self.total_params:,d}  peak activation elements {self.peak_activation:,d}")
        return "\n".join(rows)

    def to_csv(self) -> str:
        lines = ["layer,kind,channels,height,width,macs,params"]
        for l in self.layers:
            c, h, w = l.out_shape
            lines.append(f"{l.name},{l.kind},{c},{h},{w},{l.macs},{l.params}")
        lines.append(f"total,,,,,{self.total_macs},{self.total_params}")
        lines.append(f"peak_activation,,,,,{self.peak_activation},")
        return "\n".join(lines) + "\n"


def conv_macs(c_in: int, c_out: int, k: int, groups: int, h_out: int, w_out: int) -> int:
    return c_out * (c_in // groups) * k * k * h_out * w_out


class _Graph:
    """Layer-level dataflow graph; tensors are named after their producing layer."""

    def __init__(self, input_shape: tuple[int, int, int]):
        self.shapes = {"input": tuple(input_shape)}
        self.order: list[tuple[str, list[str]]] = []
        self.report = FlopsReport()

    def _add(self, name, kind, inputs, shape, macs=0, params=0) -> str:
        if name in self.shapes:
            raise FlopsConfigError(f"duplicate layer name {name}")
        self.shapes[name] = tuple(shape)
        self.order.append((name, list(inputs)))
        self.report.layers.append(LayerCount(name, kind, tuple(shape), int(macs), int(params)))
        return name

    def conv(self, name, src, c_out, k=1, stride=1, padding=0, dilation=1, groups=1, bias=False) -> str:
        c_in, h, w = self.shapes[src]
        if groups < 1 or c_in % groups or c_out % groups:
            raise FlopsConfigError(f"layer {name}: channels {c_in}->{c_out} not divisible by groups={groups}")
        ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        wo = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        if ho < 1 or wo < 1:
            raise FlopsConfigError(f"layer {name}: output extent {ho}x{wo} from {h}x{w} input")
        params = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
        return self._add(name, "conv", [src], (c_out, ho, wo), conv_macs(c_in, c_out, k, groups, ho, wo), params)

    def norm(self, name, src) -> str:
        c, h, w = self.shapes[src]
        return self._add(name, "norm", [src], (c, h, w), params=2 * c)

    def unary(self, name, kind, src) -> str:
        return self._add(name, kind, [src], self.shapes[src])

    def join(self, name, kind, srcs, shape) -> str:
        return self._add(name, kind, srcs, shape)

    def finish(self) -> FlopsReport:
        last_use = {}
        for idx, (_, inputs) in enumerate(self.order):
            for src in inputs:
                last_use[src] = idx
        live = {"input": _numel(self.shapes["input"])}
        peak = live["input"]
        for idx, (name, inputs) in enumerate(self.order):
            live[name] = _numel(self.shapes[name])
            peak = max(peak, sum(live.values()))
            for src in inputs:
                if last_use.get(src) == idx:
                    live.pop(src, None)
        self.report.peak_activation = peak
        return self.report


def _numel(shape) -> int:
    out = 1
    for s in shape:
        out *= s
    return out


def _conv_unit(g: _Graph, name: str, src: str, c_out: int, k: int, norm: bool, **kw) -> str:
    kw.setdefault("padding", kw.get("dilation", 1) * (k - 1) // 2)
    out = g.conv(f"{name}.conv", src, c_out, k, **kw)
    return g.norm(f"{name}.norm", out) if norm else out


def _model_graph(cfg: ModelConfig, input_hw: tuple[int, int]) -> _Graph:
    from .model import backbone_config

    try:
        bcfg: BackboneConfig = backbone_config(cfg)
    except ValueError as exc:
        raise FlopsConfigError(f"layer backbone: {exc}") from exc
    h, w = input_hw
    if h % bcfg.output_stride or w % bcfg.output_stride:
        raise FlopsConfigError(f"layer input: {h}x{w} not divisible by output stride {bcfg.output_stride}")
    g = _Graph((3, h, w))
    use_norm = cfg.norm == "group"
    x = _conv_unit(g, "stem", "input", cfg.stem_channels, 3, use_norm, stride=2)
    taps = {"s0": g.unary("stem.relu", "relu", x)}
    x = _conv_unit(g, "down", taps["s0"], cfg.stem_channels, 3, use_norm, stride=2)
    x = g.unary("down.relu", "relu", x)
    for si, st in enumerate(bcfg.stages, start=1):
        for bi in range(st.blocks):
            stride = st.stride if bi == 0 else 1
            p = f"stage{si}.{bi}"
            c_in = g.shapes[x][0]
            y = g.unary(f"{p}.reduce.relu", "relu", _conv_unit(g, f"{p}.reduce", x, st.width, 1, use_norm))
            y = _conv_unit(g, f"{p}.grouped", y, st.width, 3, use_norm, stride=stride,
                           dilation=st.dilation, groups=st.cardinality)
            y = g.unary(f"{p}.grouped.relu", "relu", y)
            y = _conv_unit(g, f"{p}.expand", y, st.channels, 1, use_norm)
            skip = x
            if c_in != st.channels or stride != 1:
                skip = _conv_unit(g, f"{p}.shortcut", x, st.channels, 1, use_norm, stride=stride)
            y = g.join(f"{p}.add", "add", [y, skip], g.shapes[y])
            x = g.unary(f"{p}.relu", "relu", y)
        taps[f"s{si}"] = x
    final = x
    c_f, hf, wf = g.shapes[final]

    # aggregation pipeline
    cp = cfg.agg_channels
    converted = []
    for t in cfg.taps:
        if t not in taps:
            raise FlopsConfigError(f"layer aggregator.{t}: unknown tap")
        src = taps[t]
        if g.shapes[src][1:] != (hf, wf):
            src = g.join(f"aggregator.{t}.resize", "resize", [src], (g.shapes[src][0], hf, wf))
        converted.append(g.conv(f"aggregator.{t}.convert", src, cp, 1))
    k, d = cfg.lstm_kernel, cfg.lstm_dilation
    pad = d * (k - 1) // 2
    c_x = cp
    h_prev = c_prev = None
    hidden = []
    for step, xt in enumerate(converted, start=1):
        p = f"aggregator.lstm.t{step}"
        pre = g.conv(f"{p}.conv_x", xt, 4 * cp, k, padding=pad, dilation=d)
        g.report.layers[-1].params = 0
        if step > 1:
            ph = g.conv(f"{p}.conv_h", h_prev, 4 * cp, k, padding=pad, dilation=d)
            g.report.layers[-1].params = 0
            pre = g.join(f"{p}.add", "add", [pre, ph], g.shapes[pre])
        gates = g.unary(f"{p}.gates", "gates", pre)
        ins = [gates] + ([c_prev] if c_prev else [])
        c_prev = g.join(f"{p}.cell", "cell", ins, (cp, hf, wf))
        h_prev = g.join(f"{p}.hidden", "hidden", [gates, c_prev], (cp, hf, wf))
        hidden.append(h_prev)
    # recurrent kernels are shared across steps: count them once
    lstm_params = 4 * cp * c_x * k * k + 4 * cp * cp * k * k + 4 * cp
    g.report.layers.append(LayerCount("aggregator.lstm.weights", "params", (cp, hf, wf), 0, lstm_params))
    agg = g.join("aggregator.mean", "mean", hidden, (cp, hf, wf)) if len(hidden) > 1 else hidden[0]

    # head
    try:
        c_fused = fused_channels(c_f, cp, cfg.fusion)
    except ValueError as exc:
        raise FlopsConfigError(f"layer head.fuse: {exc}") from exc
    fused = g.join("head.fuse", cfg.fusion, [final, agg], (c_fused, hf, wf))
    branches = [fused]
    for i, (bh, bw) in enumerate(clamp_bins(cfg.bins, hf, wf)):
        pooled = g.join(f"head.psp{i}.pool", "pool", [fused], (c_fused, bh, bw))
        proj = g.conv(f"head.psp{i}.conv", pooled, cfg.psp_reduce, 1)
        branches.append(g.join(f"head.psp{i}.resize", "resize", [proj], (cfg.psp_reduce, hf, wf)))
    c_psp = psp_channels(c_fused, len(cfg.bins), cfg.psp_reduce)
    cat = g.join("head.psp.concat", "concat", branches, (c_psp, hf, wf))
    logits = g.conv("head.classifier", cat, cfg.num_classes, 3, padding=1, bias=True)
    g.join("head.upsample", "resize", [logits], (cfg.num_classes, h, w))
    return g


def flops_count(config: ModelConfig | Sequence[ConvLayer], input_shape: tuple[int, int, int] | tuple[int, int]
                = (3, 64, 64)) -> FlopsReport:
    """Per-layer MACs, parameter count and peak live activation elements.

    ``config`` is either a :class:`ModelConfig` (``input_shape`` gives
    (3, H, W) or (H, W)) or a sequence of :class:`ConvLayer` applied in
    order to an input of ``input_shape`` = (C, H, W).
    """
    if isinstance(config, ModelConfig):
        hw = tuple(input_shape[-2:])
        return _model_graph(config, hw).finish()
    g = _Graph(tuple(input_shape))
    src = "input"
    for layer in config:
        src = g.conv(layer.name, src, layer.c_out, layer.kernel, layer.stride, layer.padding,
                     layer.dilation, layer.groups, layer.bias)
    return g.finish()
