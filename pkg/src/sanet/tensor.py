"""Dense tensors and tape-based reverse-mode differentiation.

Every differentiable operation in the package goes through :func:`record`,
which stores the op name, its inputs and a small context on the active
:class:`Tape`.  Backward rules live in :data:`BACKWARD`, keyed by op name,
so the verification module can swap one rule out for mutation testing.

Layout is row-major ``(n, c, h, w)`` for feature maps.  Parameter vectors
(biases, normalization scale/shift) are rank 1 and losses are rank 0; no
other ranks are produced by the ops in this package.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Backward requested without a matching recorded forward pass."""


_DEFAULT_DTYPE = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the element type used by allocation helpers (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A numeric array with an optional gradient accumulator.

    ``requires_grad`` marks values whose gradient should be tracked. Leaves
    (parameters, explicit inputs) and tensors flagged with
    :meth:`retain_grad` receive their gradient in ``grad`` after
    :meth:`Tape.backward`; gradients accumulate additively across calls.
    """

    __slots__ = ("data", "grad", "requires_grad", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class SeededRng:
    """Deterministic random source backed by numpy's PCG64 bit generator.

    Child streams are derived with :meth:`child` through ``SeedSequence``
    so that e.g. the augmentation of step 17 does not depend on how many
    draws earlier steps consumed.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    return shape


def alloc(shape: Sequence[int], fill: float = 0.0, dtype=None) -> Tensor:
    """Tensor of ``shape`` with every element equal to ``fill``."""
    shape = _check_shape(shape)
    dtype = np.dtype(dtype or _DEFAULT_DTYPE)
    total = 1
    for s in shape:
        total *= s
    if total * dtype.itemsize > np.iinfo(np.intp).max:
        raise MemoryError(f"cannot allocate tensor of shape {shape}")
    return Tensor(np.full(shape, fill, dtype=dtype))


def he_init(shape: Sequence[int], fan_in: int, rng: SeededRng, dtype=None) -> Tensor:
    """He-normal samples: i.i.d. N(0, 2/fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    shape = _check_shape(shape)
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(shape, std).astype(dtype or _DEFAULT_DTYPE, copy=False)
    return Tensor(data)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


# -- tape ------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    ctx: dict


BACKWARD: dict[str, Callable[[dict, np.ndarray], tuple]] = {}


def backward_rule(name: str):
    """Register the backward rule for op ``name``.

    A rule receives the saved context and the upstream gradient and returns
    one gradient (or ``None``) per recorded input.
    """

    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Records differentiable ops executed inside its ``with`` block."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def backward(self, output: Tensor, output_grad=None) -> None:
        """Propagate ``output_grad`` (default ones) from ``output`` to all leaves."""
        if not self.nodes:
            raise TapeError("backward called before any forward pass was recorded")
        if output_grad is None:
            g0 = np.ones_like(output.data)
        else:
            g0 = np.asarray(output_grad.data if isinstance(output_grad, Tensor) else output_grad,
                            dtype=output.dtype)
            if g0.shape != output.shape:
                raise ShapeError(f"output_grad shape {g0.shape} != output shape {output.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(output) not in produced:
            raise TapeError("output was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(output): g0}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if node.output._retain:
                _accumulate(node.output, g)
            in_grads = BACKWARD[node.op](node.ctx, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or inp is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.pop(key, None)
            if g is not None:
                _accumulate(leaf, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def record(op: str, out: np.ndarray, inputs: tuple, ctx: dict) -> Tensor:
    """Wrap ``out`` in a Tensor and log the op on the active tape if needed."""
    tape = active_tape()
    needs = tape is not None and any(t is not None and t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, result, ctx))
    return result


# -- elementwise math ------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Per-element ``add`` or ``hadamard`` product of equally shaped tensors."""
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), {})


@backward_rule("add")
def _add_backward(ctx, g):
    return g, g


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    return record("hadamard", a.data * b.data, (a, b), {"a": a.data, "b": b.data})


@backward_rule("hadamard")
def _hadamard_backward(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, recorded as one op."""
    if not xs:
        raise ValueError("add_n needs at least one tensor")
    for x in xs[1:]:
        _same_shape(xs[0], x, "add_n")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return record("add_n", out, tuple(xs), {"n": len(xs)})


@backward_rule("add_n")
def _add_n_backward(ctx, g):
    return (g,) * ctx["n"]


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a scalar constant (the only broadcasting allowed)."""
    return record("scale", x.data * alpha, (x,), {"alpha": alpha})


@backward_rule("scale")
def _scale_backward(ctx, g):
    return (g * ctx["alpha"],)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh`` or ``relu``."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record("sigmoid", y, (x,), {"y": y})


@backward_rule("sigmoid")
def _sigmoid_backward(ctx, g):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", y, (x,), {"y": y})


@backward_rule("tanh")
def _tanh_backward(ctx, g):
    y = ctx["y"]
    return (g * (1.0 - y * y),)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), {"mask": mask})


@backward_rule("relu")
def _relu_backward(ctx, g):
    return (g * ctx["mask"],)


def sum_all(x: Tensor) -> Tensor:
    return record("sum_all", np.asarray(x.data.sum()), (x,), {"shape": x.shape})


@backward_rule("sum_all")
def _sum_all_backward(ctx, g):
    return (np.broadcast_to(g, ctx["shape"]).copy(),)
