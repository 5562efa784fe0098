"""Multi-layer feature aggregation.

Each backbone tap is brought to a common (c', h', w') shape by a bilinear
resize followed by a bias-free 1x1 convolution.  The converted taps are fed
shallow-to-deep through a ConvLSTM and the hidden maps are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .convlstm import ConvLSTMCell, run_sequence
from .ops import bilinear_resize, conv2d
from .tensor import SeededRng, ShapeError, Tensor, add_n, he_init, scale

TAP_NAMES = ("s0", "s1", "s2", "s3", "s4")


@dataclass
class TapSpec:
    source: str
    conversion_kernel: Tensor

    def __post_init__(self):
        k = self.conversion_kernel
        if k.data.ndim != 4 or k.shape[2:] != (1, 1):
            raise ShapeError(f"conversion kernel for {self.source} must be (c', c_t, 1, 1), got {k.shape}")


@dataclass
class AggregatorConfig:
    target: tuple[int, int, int]  # (c', h', w')
    taps: list[TapSpec]
    cell: ConvLSTMCell = field(repr=False)

    def __post_init__(self):
        if not self.taps:
            raise ValueError("aggregator needs at least one tap")
        if self.cell.hidden_channels != self.target[0]:
            raise ShapeError(f"cell hidden channels {self.cell.hidden_channels} != c' {self.target[0]}")

    @classmethod
    def create(cls, tap_channels: dict[str, int], target: tuple[int, int, int], rng: SeededRng,
               kernel_size: int = 3, dilation: int = 2) -> "AggregatorConfig":
        c_prime = target[0]
        taps = []
        for idx, (name, c_t) in enumerate(tap_channels.items()):
            kernel = he_init((c_prime, c_t, 1, 1), c_t, rng.child(1, idx))
            kernel.requires_grad = True
            taps.append(TapSpec(name, kernel))
        cell = ConvLSTMCell.create(c_prime, c_prime, rng.child(2), kernel_size, dilation)
        return cls(tuple(target), taps, cell)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"convert.{t.source}": t.conversion_kernel for t in self.taps}
        params.update({f"lstm.{k}": v for k, v in self.cell.parameters().items()})
        return params


def convert_tap(x: Tensor, spec: TapSpec, target: tuple[int, int, int]) -> Tensor:
    """Resize ``x`` to (h', w') and project its channels to c' with a 1x1 conv."""
    c_prime, h, w = target
    if x.data.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"tap {spec.source} has invalid shape {x.shape}")
    if x.shape[1] != spec.conversion_kernel.shape[1]:
        raise ShapeError(f"tap {spec.source} has {x.shape[1]} channels, "
                         f"conversion kernel expects {spec.conversion_kernel.shape[1]}")
    if spec.conversion_kernel.shape[0] != c_prime:
        raise ShapeError(f"conversion kernel outputs {spec.conversion_kernel.shape[0]} channels, target c'={c_prime}")
    return conv2d(bilinear_resize(x, h, w), spec.conversion_kernel)


def mean_maps(hs: Sequence[Tensor]) -> Tensor:
    return scale(add_n(list(hs)), 1.0 / len(hs))


def aggregate(taps: Sequence[Tensor], config: AggregatorConfig,
              target: tuple[int, int, int] | None = None) -> Tensor:
    """Mean of the ConvLSTM hidden maps over the converted taps (shallow first).

    ``target`` overrides ``config.target``; the model passes the backbone's
    final extents here so one parameter set serves any input size.
    """
    target = tuple(target) if target is not None else config.target
    if len(taps) == 0:
        raise ValueError("aggregate needs at least one tap")
    if len(taps) != len(config.taps):
        raise ShapeError(f"got {len(taps)} taps, config expects {len(config.taps)}")
    converted = [convert_tap(x, spec, target) for x, spec in zip(taps, config.taps)]
    hs = run_sequence(config.cell, converted)
    if len(hs) == 1:
        return hs[0]
    return mean_maps(hs)
