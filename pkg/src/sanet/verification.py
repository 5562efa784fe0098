"""Independent oracles and numerical checks.

Nothing here is used on the training path.  The oracles are deliberately
naive (explicit loops, explicit prefix sets) so that they share no code with
the kernels they validate.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import SeededRng, Tape, Tensor


def _concat(xs, axis):
    from .ops import concat

    return concat(xs, axis)


class InstrumentationError(RuntimeError):
    pass


# -- finite differences ------------------------------------------------------

@dataclass
class GradReport:
    name: str
    worst_rel_err: float
    passed: bool
    checked: int
    per_input: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<32} {self.checked:>6} {self.worst_rel_err:>12.3e}  {status}"


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def avoid_kinks(x: Tensor, rng: SeededRng, margin: float = 1e-6) -> Tensor:
    """Resample entries lying within ``margin`` of zero (relu kinks)."""
    data = x.data
    bad = np.abs(data) < margin
    while bad.any():
        data[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(data) < margin
    return x


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
                      step: float = 1e-5, name: str = "op", seed: int = 0,
                      max_elements: int | None = None, input_names: Sequence[str] | None = None) -> GradReport:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    The scalar objective is ``sum(R * fn(*inputs))`` for a fixed random
    projection ``R``.  ``max_elements`` caps the number of checked entries
    per input (chosen at random); ``None`` checks them all.
    """
    rng = SeededRng(seed, 7)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise InstrumentationError(f"{name}: non-finite forward output")
    proj = rng.normal(out.shape)
    tape.backward(out, proj)

    worst = 0.0
    checked = 0
    per_input = {}
    names = list(input_names) if input_names is not None else [f"in{i}" for i in range(len(inputs))]
    for x, label in zip(inputs, names):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        if not np.all(np.isfinite(analytic)):
            raise InstrumentationError(f"{name}: non-finite analytic gradient for {label}")
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.permutation(flat.size)[:max_elements]
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = fn(*inputs).data
            flat[i] = orig - step
            minus = fn(*inputs).data
            flat[i] = orig
            if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
                raise InstrumentationError(f"{name}: non-finite output while perturbing {label}")
            numeric = float((proj * (plus - minus)).sum() / (2 * step))
            errs.append(float(relative_error(analytic.reshape(-1)[i], numeric)))
        w = max(errs) if errs else 0.0
        per_input[label] = w
        worst = max(worst, w)
        checked += len(idx)
    return GradReport(name, worst, worst <= tolerance, checked, per_input)


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.1, index: int = 0):
    """Temporarily scale one element of op ``op``'s first input gradient.

    Mutation-test helper: a correct checker must flag the corruption.
    """
    from . import convlstm, ops, training  # noqa: F401  (register every backward rule)

    if op not in T.BACKWARD:
        raise ValueError(f"no backward rule named {op!r}; known: {', '.join(sorted(T.BACKWARD))}")
    original = T.BACKWARD[op]

    def broken(ctx, g):
        grads = list(original(ctx, g))
        for k, gk in enumerate(grads):
            if gk is not None:
                gk = np.array(gk, copy=True)
                # .flat writes through even when gk is non-contiguous
                gk.flat[index] *= factor
                if gk.flat[index] == 0:
                    gk.flat[index] = 1e-3
                grads[k] = gk
                break
        return tuple(grads)

    T.BACKWARD[op] = broken
    try:
        yield
    finally:
        T.BACKWARD[op] = original


# -- oracles -----------------------------------------------------------------

def conv_oracle(x, kernel, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1,
                groups: int = 1) -> np.ndarray:
    """Definitional cross-correlation with explicit loops."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    w = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=float)
    b = None if bias is None else np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=float)
    n, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    if c_in % groups or c_out % groups or cg * groups != c_in:
        raise T.ShapeError("channel/group mismatch")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise T.ShapeError("empty output")
    out = np.zeros((n, c_out, ho, wo))
    per_group_out = c_out // groups
    for bi in range(n):
        for co in range(c_out):
            grp = co // per_group_out
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        src_c = grp * cg + ci
                        for ky in range(kh):
                            iy = oy * stride - padding + ky * dilation
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride - padding + kx * dilation
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[bi, src_c, iy, ix] * w[co, ci, ky, kx]
                    if b is not None:
                        acc += b[co]
                    out[bi, co, oy, ox] = acc
    return out


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def fclstm_reference(weights: dict[str, np.ndarray], xs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Fully-connected LSTM with the same gate layout as the ConvLSTM.

    ``weights`` maps ``w_ix``.. ``w_gh`` to matrices (hidden x in) and
    ``b_i``.. ``b_g`` to vectors; each ``xs[t]`` is (batch, in).
    """
    hidden = weights["w_ix"].shape[0]
    batch = xs[0].shape[0]
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    out = []
    for x in xs:
        pre = {g: x @ weights[f"w_{g}x"].T + h @ weights[f"w_{g}h"].T + weights[f"b_{g}"] for g in "ifog"}
        i, f, o = _sig(pre["i"]), _sig(pre["f"]), _sig(pre["o"])
        g = np.tanh(pre["g"])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def jaccard_loss_of_set(mistakes: set, gt: set) -> float:
    """Discrete Jaccard loss |M| / |G u M| of a mispredicted set M."""
    union = gt | mistakes
    if not union:
        return 0.0
    return len(mistakes) / len(union)


def lovasz_oracle(errors: Sequence[float], gt_mask: Sequence[bool]) -> float:
    """Lovasz extension of the Jaccard loss evaluated from explicit prefix sets."""
    errors = [float(e) for e in errors]
    if not errors:
        return 0.0
    gt = {i for i, m in enumerate(gt_mask) if m}
    order = sorted(range(len(errors)), key=lambda i: -errors[i])
    total = 0.0
    prev = 0.0
    prefix: set = set()
    for i in order:
        prefix = prefix | {i}
        cur = jaccard_loss_of_set(prefix, gt)
        total += errors[i] * (cur - prev)
        prev = cur
    return total


def lovasz_softmax_oracle(probs: np.ndarray, labels: np.ndarray, memo: dict | None = None) -> float:
    """Mean of :func:`lovasz_oracle` over classes present in ``labels``; probs is (P, C).

    ``memo`` caches per-class values keyed by the sorted (error, is_gt) pairs,
    which fully determine them; exhaustive sweeps revisit the same keys often.
    """
    values = []
    for c in range(probs.shape[1]):
        gt = [int(l) == c for l in labels]
        if not any(gt):
            continue
        errors = [1.0 - probs[i, c] if gt[i] else probs[i, c] for i in range(len(labels))]
        if memo is None:
            values.append(lovasz_oracle(errors, gt))
            continue
        key = tuple(sorted(zip(errors, gt)))
        if key not in memo:
            memo[key] = lovasz_oracle([e for e, _ in key], [g for _, g in key])
        values.append(memo[key])
    return sum(values) / len(values) if values else 0.0


def micro_model_config():
    """2-image, 16x16, 3-class network small enough for exhaustive-ish checks."""
    from .config import ModelConfig

    return ModelConfig(stem_channels=8, stage_blocks=(1, 1, 1, 1), stage_channels=(8, 16, 16, 16),
                       cardinality=2, agg_channels=8, bins=((2, 2), (1, 1)), psp_reduce=4,
                       gn_group_channels=4, num_classes=3)


def _rand(rng: SeededRng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, scale))


def _check_elementwise(rng):
    a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
    return (lambda a, b: T.add_n([T.hadamard(a, b), T.add(a, b)]), [a, b], {})


def _check_activation(kind):
    def build(rng):
        x = avoid_kinks(_rand(rng, 2, 3, 4, 4), rng)
        return (lambda x: T.activation(x, kind), [x], {})
    return build


def _check_conv(stride, padding, dilation, groups, bias=True):
    def build(rng):
        from .ops import conv2d

        x = _rand(rng, 2, 4, 7, 7)
        w = _rand(rng, 4, 4 // groups, 3, 3)
        inputs = [x, w] + ([_rand(rng, 4)] if bias else [])

        def fn(x, w, b=None):
            return conv2d(x, w, b, stride, padding, dilation, groups)
        return (fn, inputs, {})
    return build


def _check_resize(rng):
    from .ops import bilinear_resize

    x = _rand(rng, 2, 2, 5, 4)
    return (lambda x: T.add_n([T.scale(bilinear_resize(bilinear_resize(x, 9, 3), 5, 4), 1.0), x]), [x], {})


def _check_pool(rng):
    from .ops import adaptive_avg_pool

    x = _rand(rng, 2, 2, 7, 5)
    return (lambda x: adaptive_avg_pool(x, 3, 2), [x], {})


def _check_concat(rng):
    from .ops import concat_channels, slice_channels

    a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 3, 3, 3)
    return (lambda a, b: slice_channels(concat_channels([a, b, a]), 1, 6), [a, b], {})


def _check_group_norm(rng):
    from .ops import group_norm

    x = _rand(rng, 2, 6, 3, 3)
    s, sh = _rand(rng, 6), _rand(rng, 6)
    return (lambda x, s, sh: group_norm(x, 3, s, sh), [x, s, sh], {})


def _check_softmax(rng):
    from .ops import softmax_channels

    x = _rand(rng, 2, 4, 3, 3)
    return (softmax_channels, [x], {})


def _check_lstm_step(rng):
    from .convlstm import CellState, ConvLSTMCell, step

    cell = ConvLSTMCell.create(3, 3, rng.child(1), kernel_size=3, dilation=2)
    x, h, c = _rand(rng, 2, 3, 5, 5), _rand(rng, 2, 3, 5, 5), _rand(rng, 2, 3, 5, 5)
    params = cell.parameters()
    names = list(params)

    def fn(x, h, c, *ps):
        return _concat([step(cell, x, CellState(h, c)).h, step(cell, x, CellState(h, c)).c], axis=1)
    return (fn, [x, h, c, *params.values()], {"input_names": ["x", "h", "c", *names]})


def _check_lstm_unroll(rng):
    from .convlstm import ConvLSTMCell, run_sequence

    cell = ConvLSTMCell.create(3, 3, rng.child(1), kernel_size=3, dilation=2)
    for p in cell.parameters().values():
        p.data += rng.normal(p.shape, 0.1)  # non-zero biases
    xs = [_rand(rng, 1, 3, 4, 4) for _ in range(4)]
    params = cell.parameters()

    def fn(*args):
        return _concat(run_sequence(cell, xs), axis=1)
    return (fn, [*params.values(), *xs], {"input_names": [*params, "x1", "x2", "x3", "x4"]})


def _check_aggregate(rng):
    from .aggregator import AggregatorConfig, aggregate, convert_tap

    chans = {"s0": 2, "s1": 3, "s2": 4, "s3": 4, "s4": 5}
    cfg = AggregatorConfig.create(chans, (3, 4, 4), rng.child(1), kernel_size=3, dilation=2)
    taps = [_rand(rng, 1, 2, 8, 8), _rand(rng, 1, 3, 8, 8), _rand(rng, 1, 4, 4, 4),
            _rand(rng, 1, 4, 4, 4), _rand(rng, 1, 5, 4, 4)]
    params = cfg.parameters()

    def fn(*args):
        return T.add(aggregate(taps, cfg), convert_tap(taps[0], cfg.taps[0], cfg.target))
    return (fn, [*taps, *params.values()], {"input_names": [*chans, *params], "max_elements": 12})


def _check_bottleneck(rng):
    from .backbone import Bottleneck, StageConfig, bottleneck_forward

    st = StageConfig(1, 8, cardinality=2, stride=2, dilation=1)
    block = Bottleneck.create(4, st, 2, rng.child(1), "group", 2)
    x = _rand(rng, 2, 4, 6, 6)
    params = block.parameters()
    return (lambda *a: bottleneck_forward(x, block), [x, *params.values()],
            {"input_names": ["x", *params], "max_elements": 12})


def _check_psp(rng):
    from .head import PSPModule, psp_forward

    psp = PSPModule.create(4, [(3, 3), (2, 2), (1, 1)], 2, rng.child(1))
    x = _rand(rng, 2, 4, 5, 5)
    return (lambda x, *ks: psp_forward(x, psp), [x, *psp.kernels], {})


def _check_fuse_classify(rng):
    from .head import Head, fuse_and_classify

    outs = []
    for fusion in ("concat", "add", "aggregated"):
        head = Head.create(4, 4, 3, [(2, 2), (1, 1)], 2, rng.child(len(outs)), fusion)
        outs.append(head)
    a, b = _rand(rng, 2, 4, 4, 4), _rand(rng, 2, 4, 4, 4)
    params = [p for h in outs for p in h.parameters().values()]

    def fn(a, b, *ps):
        return _concat([fuse_and_classify(a, b, h, (16, 16)) for h in outs], axis=1)
    return (fn, [a, b, *params], {"max_elements": 12})


def _check_cross_entropy(rng):
    from .training import cross_entropy

    x = _rand(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, (2, 3, 3))
    labels[0, 0, 0] = 255
    return (lambda x: cross_entropy(x, labels), [x], {})


def _check_lovasz(rng):
    from .ops import softmax_channels
    from .training import lovasz_softmax

    x = _rand(rng, 2, 3, 3, 3)
    labels = rng.integers(0, 3, (2, 3, 3))
    labels[1, 2, 2] = 255
    return (lambda x: lovasz_softmax(softmax_channels(x), labels), [x], {})


def _check_micro_model(rng):
    from .model import SANet

    model = SANet(micro_model_config(), seed=int(rng.integers(0, 2**31)))
    x = Tensor(rng.random((2, 3, 16, 16)))
    params = model.parameters()
    return (lambda *ps: model(x), list(params.values()), {"input_names": list(params), "max_elements": 4})


GRADCHECKS: dict[str, Callable] = {
    "elementwise": _check_elementwise,
    "sigmoid": _check_activation("sigmoid"),
    "tanh": _check_activation("tanh"),
    "relu": _check_activation("relu"),
    "conv2d": _check_conv(1, 1, 1, 1),
    "conv2d_strided_dilated": _check_conv(2, 2, 2, 1),
    "conv2d_grouped": _check_conv(1, 2, 2, 2, bias=False),
    "conv2d_depthwise": _check_conv(1, 1, 1, 4),
    "bilinear_resize": _check_resize,
    "adaptive_avg_pool": _check_pool,
    "concat_slice": _check_concat,
    "group_norm": _check_group_norm,
    "softmax_channels": _check_softmax,
    "convlstm_step": _check_lstm_step,
    "convlstm_unroll4": _check_lstm_unroll,
    "aggregate": _check_aggregate,
    "bottleneck": _check_bottleneck,
    "psp_forward": _check_psp,
    "fuse_and_classify": _check_fuse_classify,
    "cross_entropy": _check_cross_entropy,
    "lovasz_softmax": _check_lovasz,
    "micro_model": _check_micro_model,
}


def run_gradcheck(name: str, tolerance: float = 1e-4, seed: int = 0) -> GradReport:
    from .tensor import default_dtype

    with default_dtype("float64"):
        rng = SeededRng(seed, 101)
        fn, inputs, kw = GRADCHECKS[name](rng)
        return finite_diff_check(fn, inputs, tolerance=tolerance, name=name, seed=seed, **kw)


def gradcheck_suite(names: Sequence[str] | None = None, tolerance: float = 1e-4) -> list[GradReport]:
    return [run_gradcheck(n, tolerance) for n in (names or list(GRADCHECKS))]
