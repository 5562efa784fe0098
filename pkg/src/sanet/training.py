"""Losses, metrics, optimizer, schedule, augmentation and multi-scale inference."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ops import resize_array, softmax_array
from .tensor import SeededRng, ShapeError, Tensor, backward_rule, record

IGNORE_INDEX = 255


class EmptyTargetWarning(RuntimeWarning):
    """Every pixel was ignored (or no class was present); the loss is 0."""


# -- cross-entropy -------------------------------------------------------------

def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    return labels.astype(np.int64, copy=False)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel-wise negative log-likelihood over non-ignored pixels."""
    labels = _check_labels(logits, labels)
    k = logits.shape[1]
    valid = labels != ignore_index
    if np.any(valid & ((labels < 0) | (labels >= k))):
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_index")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: all pixels ignored", EmptyTargetWarning, stacklevel=2)
        return record("cross_entropy", np.asarray(0.0, dtype=logits.dtype), (logits,),
                      {"p": None, "shape": logits.shape})
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (np.exp(logp) - onehot) * valid[:, None] / count
    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,),
                  {"p": grad, "shape": logits.shape})


@backward_rule("cross_entropy")
def _cross_entropy_backward(ctx, g):
    if ctx["p"] is None:
        return (np.zeros(ctx["shape"]),)
    return (ctx["p"] * g,)


# -- Lovasz-softmax --------------------------------------------------------------

def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard loss along a sorted ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_flat(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Loss, gradient w.r.t. ``probs`` (P, C) and present-class count for flat pixels.

    All classes are handled at once: column c holds that class's errors,
    sorted descending, with Jaccard increments along the sorted order.
    """
    n_pix, n_cls = probs.shape
    fg = (labels[:, None] == np.arange(n_cls)[None, :]).astype(probs.dtype)
    present = fg.sum(axis=0) > 0
    m = int(present.sum())
    if m == 0:
        return 0.0, np.zeros_like(probs), 0
    errors = np.abs(fg - probs)
    order = np.argsort(-errors, axis=0, kind="stable")
    fg_sorted = np.take_along_axis(fg, order, axis=0)
    gts = fg.sum(axis=0)
    intersection = gts - np.cumsum(fg_sorted, axis=0)
    union = gts + np.cumsum(1.0 - fg_sorted, axis=0)
    jaccard = 1.0 - intersection / union
    dj = np.diff(jaccard, axis=0, prepend=0.0)
    per_class = (np.take_along_axis(errors, order, axis=0) * dj).sum(axis=0)
    loss = float(per_class[present].sum() / m)
    # d|fg - p|/dp = -1 on foreground, +1 elsewhere
    sorted_grad = np.where(fg_sorted > 0, -1.0, 1.0) * dj * present[None, :] / m
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, order, sorted_grad, axis=0)
    return loss, grad, m


def lovasz_softmax(probs: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present in the batch."""
    labels = _check_labels(probs, labels)
    n, k, h, w = probs.shape
    flat_p = probs.data.transpose(0, 2, 3, 1).reshape(-1, k)
    flat_l = labels.reshape(-1)
    keep = flat_l != ignore_index
    loss, grad_kept, present = lovasz_flat(flat_p[keep], flat_l[keep])
    if present == 0:
        warnings.warn("lovasz_softmax: no class present", EmptyTargetWarning, stacklevel=2)
    grad = np.zeros_like(flat_p)
    grad[keep] = grad_kept
    grad = grad.reshape(n, h, w, k).transpose(0, 3, 1, 2)
    return record("lovasz_softmax", np.asarray(loss, dtype=probs.dtype), (probs,), {"grad": grad})


@backward_rule("lovasz_softmax")
def _lovasz_backward(ctx, g):
    return (ctx["grad"] * g,)


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricReport:
    per_class_iou: np.ndarray
    mean_iou: float
    pixel_accuracy: float
    confusion: np.ndarray
    present: np.ndarray = field(repr=False, default=None)

    def to_csv(self) -> str:
        lines = ["class_id,iou"]
        for c, v in enumerate(self.per_class_iou):
            lines.append(f"{c},{v:.6f}" if self.present[c] else f"{c},nan")
        lines.append(f"mean_iou,{self.mean_iou:.6f}")
        lines.append(f"pixel_accuracy,{self.pixel_accuracy:.6f}")
        return "\n".join(lines) + "\n"


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Counts indexed [label, prediction]."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if pred.shape != labels.shape:
        raise ShapeError("prediction and label maps differ in size")
    keep = labels != ignore_index
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray) -> MetricReport:
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(float)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.where(present, tp / np.maximum(denom, 1), 0.0)
    mean_iou = float(iou[present].mean()) if present.any() else 0.0
    total = conf.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return MetricReport(iou, mean_iou, acc, conf, present)


def metrics(pred: np.ndarray, labels: np.ndarray, num_classes: int,
            ignore_index: int = IGNORE_INDEX) -> MetricReport:
    """Per-class IoU, mean IoU over classes seen in pred or labels, and pixel accuracy."""
    return report_from_confusion(confusion_matrix(pred, labels, num_classes, ignore_index))


# -- optimizer and schedule ----------------------------------------------------------

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float) -> None:
    """In-place AdamW update; decay multiplies by (1 - lr*wd) before the Adam term."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - lr * state.weight_decay)
        p.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def poly_lr(step: int, total: int, lr0: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


# -- augmentation ----------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.25)
    contrast_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.75, 1.25)
    contrast_mode: str = "jitter"
    dataset_mean: float = 0.5
    dataset_std: float = 0.25
    ignore_index: int = IGNORE_INDEX


def hflip(image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), labels[..., ::-1].copy()


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def scale_crop(image: np.ndarray, labels: np.ndarray, factor: float, rng: SeededRng,
               ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    """Rescale by ``factor`` then crop or pad back to the original extents."""
    c, h, w = image.shape
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    img = resize_array(image, sh, sw)
    lab = nearest_resize(labels, sh, sw)
    out_img = np.zeros_like(image)
    out_lab = np.full_like(labels, ignore_index)
    # source window (crop) and destination offset (pad)
    oy = int(rng.integers(0, abs(sh - h) + 1))
    ox = int(rng.integers(0, abs(sw - w) + 1))
    sy, dy = (oy, 0) if sh >= h else (0, oy)
    sx, dx = (ox, 0) if sw >= w else (0, ox)
    ch, cw = min(h, sh), min(w, sw)
    out_img[:, dy:dy + ch, dx:dx + cw] = img[:, sy:sy + ch, sx:sx + cw]
    out_lab[dy:dy + ch, dx:dx + cw] = lab[sy:sy + ch, sx:sx + cw]
    return out_img, out_lab


def contrast(image: np.ndarray, gamma: float) -> np.ndarray:
    mean = image.mean()
    return mean + gamma * (image - mean)


def augment(image: np.ndarray, labels: np.ndarray, config: AugmentConfig,
            rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Random flip, rescale with crop/pad, and contrast change of one (3, H, W) sample."""
    if image.shape[1:] != labels.shape:
        raise ShapeError(f"image {image.shape} and labels {labels.shape} disagree")
    # draw every random number up front so the stream layout is fixed
    u_flip, u_scale, u_contrast = rng.random(3)
    factor = rng.uniform(*config.scale_range)
    gamma = rng.uniform(*config.contrast_range)
    crop_rng = rng.child(1)
    if u_flip < config.flip_prob:
        image, labels = hflip(image, labels)
    if u_scale < config.scale_prob and factor != 1.0:
        image, labels = scale_crop(image, labels, factor, crop_rng, config.ignore_index)
    if config.contrast_mode == "standardize":
        image = (image - config.dataset_mean) / config.dataset_std
    elif u_contrast < config.contrast_prob:
        image = contrast(image, gamma)
    return image, labels


# -- inference -------------------------------------------------------------------

def snap_extent(size: int, scale: float, multiple: int) -> int:
    return max(multiple, int(round(size * scale / multiple)) * multiple)


def multi_scale_infer(model: Callable[[Tensor], Tensor], image: np.ndarray,
                      scales: Sequence[float] = (0.75, 1.0, 1.25), multiple: int = 8) -> np.ndarray:
    """Average of per-scale softmax maps, each resized back to full resolution.

    Rescaled extents are rounded to a multiple of the model's output stride.
    """
    if len(scales) == 0:
        raise ValueError("at least one scale is required")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive, got {list(scales)}")
    image = np.asarray(image)
    h, w = image.shape[2], image.shape[3]
    acc = None
    for s in scales:
        sh, sw = snap_extent(h, s, multiple), snap_extent(w, s, multiple)
        x = image if (sh, sw) == (h, w) else resize_array(image, sh, sw)
        probs = softmax_array(model(Tensor(x)).data)
        probs = resize_array(probs, h, w)
        acc = probs if acc is None else acc + probs
    acc = acc / len(scales)
    return acc / acc.sum(axis=1, keepdims=True)
