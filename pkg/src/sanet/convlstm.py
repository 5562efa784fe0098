"""Convolutional LSTM cell and its unrolling over a sequence of feature maps.

Gate pre-activations use convolutions in both the input-to-state and the
state-to-state transitions::

    i = sigmoid(w_ix * x + w_ih * h + b_i)
    f = sigmoid(w_fx * x + w_fh * h + b_f)
    o = sigmoid(w_ox * x + w_oh * h + b_o)
    g = tanh(w_gx * x + w_gh * h + b_g)
    c' = f o c + i o g
    h' = o o tanh(c')

The eight kernels are stored separately but evaluated as two fused
convolutions (input side and hidden side) with the gates stacked on the
output-channel axis in the order i, f, o, g.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ops import concat, conv2d, slice_channels
from .tensor import SeededRng, ShapeError, Tensor, add, alloc, hadamard, he_init, sigmoid, tanh

GATES = ("i", "f", "o", "g")


@dataclass
class ConvLSTMCell:
    w_ix: Tensor
    w_ih: Tensor
    w_fx: Tensor
    w_fh: Tensor
    w_ox: Tensor
    w_oh: Tensor
    w_gx: Tensor
    w_gh: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor
    kernel_size: int = 3
    dilation: int = 2

    @classmethod
    def create(cls, in_channels: int, hidden_channels: int, rng: SeededRng,
               kernel_size: int = 3, dilation: int = 2) -> "ConvLSTMCell":
        """He-normal kernels, zero biases."""
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        k = kernel_size
        params = {}
        for idx, gate in enumerate(GATES):
            wx = he_init((hidden_channels, in_channels, k, k), in_channels * k * k, rng.child(idx, 0))
            wh = he_init((hidden_channels, hidden_channels, k, k), hidden_channels * k * k, rng.child(idx, 1))
            params[f"w_{gate}x"] = wx
            params[f"w_{gate}h"] = wh
            params[f"b_{gate}"] = alloc((hidden_channels,), 0.0)
        for t in params.values():
            t.requires_grad = True
        return cls(**params, kernel_size=k, dilation=dilation)

    @property
    def hidden_channels(self) -> int:
        return self.w_ix.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_ix.shape[1]

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    def parameters(self) -> dict[str, Tensor]:
        names = [f"w_{g}{s}" for g in GATES for s in "xh"] + [f"b_{g}" for g in GATES]
        return {name: getattr(self, name) for name in names}

    def fused(self) -> tuple[Tensor, Tensor, Tensor]:
        """Gate-stacked input kernel, hidden kernel and bias."""
        wx = concat([self.w_ix, self.w_fx, self.w_ox, self.w_gx], axis=0)
        wh = concat([self.w_ih, self.w_fh, self.w_oh, self.w_gh], axis=0)
        b = concat([self.b_i, self.b_f, self.b_o, self.b_g], axis=0)
        return wx, wh, b


@dataclass
class CellState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=None) -> "CellState":
        return cls(alloc(shape, 0.0, dtype), alloc(shape, 0.0, dtype))


def _check_input(cell: ConvLSTMCell, x: Tensor, prev: CellState | None) -> None:
    if x.data.ndim != 4 or x.shape[1] != cell.in_channels:
        raise ShapeError(f"ConvLSTM input {x.shape} does not have {cell.in_channels} channels")
    if prev is not None:
        expected = (x.shape[0], cell.hidden_channels, x.shape[2], x.shape[3])
        if prev.h.shape != expected or prev.c.shape != expected:
            raise ShapeError(f"state shapes {prev.h.shape}/{prev.c.shape} do not match {expected}")


def _step(cell: ConvLSTMCell, fused, x: Tensor, prev: CellState | None) -> CellState:
    wx, wh, b = fused
    hc = cell.hidden_channels
    pre = conv2d(x, wx, b, padding=cell.padding, dilation=cell.dilation)
    if prev is not None:
        pre = add(pre, conv2d(prev.h, wh, None, padding=cell.padding, dilation=cell.dilation))
    gates = sigmoid(slice_channels(pre, 0, 3 * hc))
    i = slice_channels(gates, 0, hc)
    f = slice_channels(gates, hc, 2 * hc)
    o = slice_channels(gates, 2 * hc, 3 * hc)
    g = tanh(slice_channels(pre, 3 * hc, 4 * hc))
    c = hadamard(i, g)
    if prev is not None:
        c = add(hadamard(f, prev.c), c)
    h = hadamard(o, tanh(c))
    return CellState(h, c)


def step(cell: ConvLSTMCell, x: Tensor, prev: CellState) -> CellState:
    """One recurrence step from ``prev`` on input ``x``; spatial extents are kept."""
    _check_input(cell, x, prev)
    return _step(cell, cell.fused(), x, prev)


def run_sequence(cell: ConvLSTMCell, xs: Sequence[Tensor], return_states: bool = False):
    """Unroll ``cell`` over ``xs`` from a zero state and return every hidden map.

    The zero initial state is handled symbolically: the hidden-side
    convolution and the forget term vanish at t=1, which is bit-identical
    to evaluating them on zeros.
    """
    if len(xs) == 0:
        raise ValueError("run_sequence needs at least one input")
    ref = xs[0].shape
    for x in xs:
        if x.shape != ref:
            raise ShapeError(f"sequence elements differ in shape: {ref} vs {x.shape}")
        _check_input(cell, x, None)
    fused = cell.fused()
    state = None
    states = []
    for x in xs:
        state = _step(cell, fused, x, state)
        states.append(state)
    if return_states:
        return states
    return [s.h for s in states]


def zero_cell(in_channels: int, hidden_channels: int, kernel_size: int = 1, dilation: int = 1) -> ConvLSTMCell:
    """Cell with all kernels and biases zero (test and oracle fixture)."""
    k = kernel_size
    params = {}
    for gate in GATES:
        params[f"w_{gate}x"] = Tensor(np.zeros((hidden_channels, in_channels, k, k)), requires_grad=True)
        params[f"w_{gate}h"] = Tensor(np.zeros((hidden_channels, hidden_channels, k, k)), requires_grad=True)
        params[f"b_{gate}"] = Tensor(np.zeros(hidden_channels), requires_grad=True)
    return ConvLSTMCell(**params, kernel_size=k, dilation=dilation)
