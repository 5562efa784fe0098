"""Differentiable numeric kernels: convolution, resizing, pooling,
concatenation, group normalization and channel softmax.

Convolution is cross-correlation with zero padding, evaluated by im2col and
a batched matmul over groups.  Resize and adaptive pooling are separable
linear maps, so both are applied as ``R_h @ x @ R_w.T`` and their backward
passes are the transposed products.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, backward_rule, record


def conv_out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (n, c_in, h, w) with ``kernel``
    (c_out, c_in/groups, kh, kw); optional per-channel ``bias``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"bad conv hyper-parameters stride={stride} padding={padding} "
                         f"dilation={dilation} groups={groups}")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = kernel.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if cg != c_in // groups:
        raise ShapeError(f"kernel expects {cg * groups} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    ho = conv_out_extent(h, kh, stride, padding, dilation)
    wo = conv_out_extent(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} < 1 for input {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xd, kh, kw, ho, wo, stride, dilation)
    cols = np.ascontiguousarray(cols).reshape(n, groups, cg * kh * kw, ho * wo)
    wmat = kernel.data.reshape(groups, c_out // groups, cg * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    ctx = {"cols": cols, "wmat": wmat, "x_shape": x.shape, "k_shape": kernel.shape,
           "stride": stride, "padding": padding, "dilation": dilation, "groups": groups,
           "has_bias": bias is not None}
    return record("conv2d", out, (x, kernel, bias), ctx)


@backward_rule("conv2d")
def _conv2d_backward(ctx, g):
    n, c_in, h, w = ctx["x_shape"]
    c_out, cg, kh, kw = ctx["k_shape"]
    groups, stride, padding, dilation = ctx["groups"], ctx["stride"], ctx["padding"], ctx["dilation"]
    ho, wo = g.shape[2], g.shape[3]
    gm = g.reshape(n, groups, c_out // groups, ho * wo)

    dw = np.matmul(gm, ctx["cols"].transpose(0, 1, 3, 2)).sum(axis=0).reshape(c_out, cg, kh, kw)

    dcols = np.matmul(ctx["wmat"].transpose(0, 2, 1), gm).reshape(n, c_in, kh, kw, ho, wo)
    dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            dxp[:, :, r:r + span_h:stride, s:s + span_w:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    db = g.sum(axis=(0, 2, 3)) if ctx["has_bias"] else None
    return dx, dw, db


# -- resizing ----------------------------------------------------------------

@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for d in range(n_out):
        s = (d + 0.5) * ratio - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        frac = s - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    m.setflags(write=False)
    return m


def _apply_separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    return np.matmul(np.matmul(mh, x), mw.T)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the spatial axes to ``out_h`` x ``out_w``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extent must be positive, got {out_h}x{out_w}")
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects rank-4 input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        mh = mw = None
        out = x.data.copy()
    else:
        mh = resize_matrix(h, out_h).astype(x.dtype, copy=False)
        mw = resize_matrix(w, out_w).astype(x.dtype, copy=False)
        out = _apply_separable(x.data, mh, mw)
    return record("bilinear_resize", out, (x,), {"mh": mh, "mw": mw})


@backward_rule("bilinear_resize")
def _bilinear_resize_backward(ctx, g):
    if ctx["mh"] is None:
        return (g,)
    return (_apply_separable(g, ctx["mh"].T, ctx["mw"].T),)


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-recording bilinear resize of the last two axes of a numpy array."""
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x.copy()
    mh = resize_matrix(h, out_h).astype(x.dtype, copy=False)
    mw = resize_matrix(w, out_w).astype(x.dtype, copy=False)
    return _apply_separable(x, mh, mw)


# -- pooling -----------------------------------------------------------------

@lru_cache(maxsize=256)
def pool_matrix(n_in: int, bins: int) -> np.ndarray:
    """(bins, n_in) averaging weights over windows [floor(i*n/b), ceil((i+1)*n/b))."""
    m = np.zeros((bins, n_in))
    for i in range(bins):
        lo = (i * n_in) // bins
        hi = -((-(i + 1) * n_in) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def adaptive_avg_pool(x: Tensor, bin_h: int, bin_w: int) -> Tensor:
    """Average over a ``bin_h`` x ``bin_w`` grid of adaptive windows."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects rank-4 input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if not (1 <= bin_h <= h and 1 <= bin_w <= w):
        raise ShapeError(f"bins {bin_h}x{bin_w} invalid for {h}x{w} input; clamp bins first")
    mh = pool_matrix(h, bin_h).astype(x.dtype, copy=False)
    mw = pool_matrix(w, bin_w).astype(x.dtype, copy=False)
    out = _apply_separable(x.data, mh, mw)
    return record("adaptive_avg_pool", out, (x,), {"mh": mh, "mw": mw})


@backward_rule("adaptive_avg_pool")
def _adaptive_avg_pool_backward(ctx, g):
    return (_apply_separable(g, ctx["mh"].T, ctx["mw"].T),)


# -- layout ------------------------------------------------------------------

def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return record("concat", out, tuple(xs), {"sizes": sizes, "axis": axis})


@backward_rule("concat")
def _concat_backward(ctx, g):
    bounds = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=ctx["axis"]))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation of (n, c_k, h, w) tensors, input order preserved."""
    for t in xs:
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels expects rank-4 tensors, got {t.shape}")
    return concat(xs, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for {x.shape}")
    return record("slice_channels", x.data[:, start:stop].copy(), (x,),
                  {"shape": x.shape, "start": start, "stop": stop})


@backward_rule("slice_channels")
def _slice_channels_backward(ctx, g):
    dx = np.zeros(ctx["shape"], dtype=g.dtype)
    dx[:, ctx["start"]:ctx["stop"]] = g
    return (dx,)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(slice_channels(x, start, start + s))
        start += s
    return out


# -- normalization -------------------------------------------------------------

def group_norm(x: Tensor, num_groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardization followed by a per-channel affine map."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.data.reshape(n, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    ctx = {"xhat": xhat, "inv": inv, "groups": num_groups, "scale": scale.data}
    return record("group_norm", out, (x, scale, shift), ctx)


@backward_rule("group_norm")
def _group_norm_backward(ctx, g):
    xhat, inv, groups = ctx["xhat"], ctx["inv"], ctx["groups"]
    n, c, h, w = g.shape
    dscale = (g * xhat).sum(axis=(0, 2, 3))
    dshift = g.sum(axis=(0, 2, 3))
    dxhat = (g * ctx["scale"][None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(n, c, h, w), dscale, dshift


# -- softmax -------------------------------------------------------------------

def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis."""
    if x.data.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"softmax_channels expects (n, c>=1, h, w), got {x.shape}")
    p = softmax_array(x.data)
    return record("softmax_channels", p, (x,), {"p": p})


@backward_rule("softmax_channels")
def _softmax_channels_backward(ctx, g):
    p = ctx["p"]
    return (p * (g - (g * p).sum(axis=1, keepdims=True)),)
