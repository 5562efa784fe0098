"""Training and evaluation drivers shared by the CLI and the ablation runner."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, dump_config, parse_config
from .imageio import atomic_write
from .model import SANet
from .ops import softmax_channels
from .tensor import SeededRng, Tape, Tensor, add, scale
from .training import (AdamWState, AugmentConfig, MetricReport, adamw_step, augment, confusion_matrix,
                       cross_entropy, lovasz_softmax, multi_scale_infer, poly_lr, report_from_confusion)

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class EvalResult:
    loss: float
    report: MetricReport


@dataclass
class TrainResult:
    model: object
    state: AdamWState
    curve: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_score: float = float("nan")
    final: EvalResult | None = None


def batch_indices(step: int, batch: int, n: int, seed: int) -> list[int]:
    """Sample indices for ``step``; each epoch is a fresh seeded permutation."""
    out = []
    perms = {}
    for j in range(batch):
        pos = step * batch + j
        epoch = pos // n
        if epoch not in perms:
            perms[epoch] = SeededRng(seed, 1, epoch).permutation(n)
        out.append(int(perms[epoch][pos % n]))
    return out


def augment_config(cfg: RunConfig) -> AugmentConfig:
    t = cfg.train
    return AugmentConfig(flip_prob=t.flip_prob, scale_prob=t.scale_prob, contrast_prob=t.contrast_prob,
                         contrast_mode=t.contrast_mode, ignore_index=cfg.data.ignore_index)


def compute_loss(logits: Tensor, labels: np.ndarray, cfg: RunConfig, step: int) -> Tensor:
    kind = cfg.train.loss
    ignore = cfg.data.ignore_index
    if kind == "ce":
        return cross_entropy(logits, labels, ignore)
    lov = lovasz_softmax(softmax_channels(logits), labels, ignore)
    if kind == "lovasz":
        return lov
    if kind == "ce+lovasz":
        ce = cross_entropy(logits, labels, ignore)
        if step < cfg.train.lovasz_after:
            return ce
        return add(ce, scale(lov, cfg.train.lovasz_weight))
    raise ValueError(f"unknown loss {kind!r}")


def evaluate(model: Callable[[Tensor], Tensor], images: np.ndarray, labels: np.ndarray, num_classes: int,
             ignore_index: int = 255, scales=None, batch: int = 4) -> EvalResult:
    """Confusion-matrix metrics over a split; ``scales`` enables multi-scale inference."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    loss_sum, count = 0.0, 0
    for start in range(0, len(images), batch):
        x = images[start:start + batch]
        y = labels[start:start + batch]
        if scales:
            probs = multi_scale_infer(model, x, scales)
            valid = y != ignore_index
            if valid.any():
                p = np.take_along_axis(probs, np.where(valid, y, 0)[:, None].astype(np.int64), axis=1)[:, 0]
                loss_sum += float(-np.log(np.maximum(p[valid], 1e-300)).sum())
                count += int(valid.sum())
            pred = probs.argmax(axis=1)
        else:
            logits = model(Tensor(x))
            valid = int((y != ignore_index).sum())
            if valid:
                loss_sum += cross_entropy(logits, y, ignore_index).item() * valid
                count += valid
            pred = logits.data.argmax(axis=1)
        conf += confusion_matrix(pred, y, num_classes, ignore_index)
    return EvalResult(loss_sum / max(count, 1), report_from_confusion(conf))


def model_checkpoint(model: SANet, cfg: RunConfig, step: int, state: AdamWState | None = None) -> ckpt_io.Checkpoint:
    tensors = {k: v.data for k, v in model.parameters().items()}
    if state is not None:
        for k in list(tensors):
            if k in state.m:
                tensors[f"opt.m/{k}"] = state.m[k]
                tensors[f"opt.v/{k}"] = state.v[k]
    return ckpt_io.Checkpoint(dump_config(cfg), tensors, step)


def model_from_checkpoint(ck: ckpt_io.Checkpoint, cfg: RunConfig | None = None) -> tuple[SANet, RunConfig]:
    saved = parse_config(ck.config_text)
    if cfg is None:
        cfg = saved
    elif cfg.model.num_classes != saved.model.num_classes:
        raise ValueError(f"checkpoint has {saved.model.num_classes} classes, config asks for {cfg.model.num_classes}")
    model = SANet(saved.model, seed=saved.train.seed, dtype=cfg.train.precision)
    params = model.parameters()
    stored = ck.params()
    if set(stored) != set(params):
        raise ValueError("checkpoint parameters do not match the model architecture")
    for k, p in params.items():
        if stored[k].shape != p.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {stored[k].shape} != model {p.shape}")
        p.data = stored[k].astype(p.dtype)
    return model, cfg


def train(cfg: RunConfig, train_images: np.ndarray, train_labels: np.ndarray,
          val_images: np.ndarray | None = None, val_labels: np.ndarray | None = None,
          out_dir: str | Path | None = None, resume: ckpt_io.Checkpoint | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Seeded training loop: augment, forward, loss, backward, AdamW with poly decay.

    ``stop_at`` ends the loop early (the schedule still spans ``train.steps``);
    together with ``resume`` this reproduces an uninterrupted run.
    """
    t = cfg.train
    dtype = np.dtype(t.precision)
    if resume is not None:
        model, _ = model_from_checkpoint(resume, cfg)
        m, v = resume.moments()
        state = AdamWState(m={k: a.astype(dtype) for k, a in m.items()},
                           v={k: a.astype(dtype) for k, a in v.items()},
                           step=resume.step, weight_decay=t.weight_decay)
        start = resume.step
    else:
        model = SANet(cfg.model, seed=t.seed, dtype=dtype)
        state = AdamWState(weight_decay=t.weight_decay)
        start = 0
    params = model.parameters()
    train_images = train_images.astype(dtype)
    if val_images is None:
        val_images, val_labels = train_images, train_labels
    val_images = val_images.astype(dtype)
    aug_cfg = augment_config(cfg)
    n = len(train_images)
    end = t.steps if stop_at is None else min(stop_at, t.steps)
    result = TrainResult(model, state)
    better = (lambda a, b: a < b) if t.checkpoint_by == "ce" else (lambda a, b: a > b)
    out = Path(out_dir) if out_dir is not None else None

    for step in range(start, end):
        idx = batch_indices(step, t.batch, n, t.seed)
        xs, ys = [], []
        for j, i in enumerate(idx):
            x, y = train_images[i], train_labels[i]
            if t.augment:
                x, y = augment(x, y, aug_cfg, SeededRng(t.seed, 2, step, j))
            xs.append(x)
            ys.append(y)
        x = np.stack(xs).astype(dtype)
        y = np.stack(ys)
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            logits = model(Tensor(x))
            loss = compute_loss(logits, y, cfg, step)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(f"non-finite loss at step {step} (batch indices {idx}, seed {t.seed})")
        tape.backward(loss)
        lr = poly_lr(step, t.steps, t.lr, t.poly_power)
        adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state, lr)
        train_acc = float((logits.data.argmax(1) == y)[y != cfg.data.ignore_index].mean())
        row = {"step": step + 1, "lr": lr, "loss": loss.item(), "train_acc": train_acc}
        if (step + 1) % t.val_every == 0 or step + 1 == t.steps:
            ev = evaluate(model, val_images, val_labels, cfg.model.num_classes, cfg.data.ignore_index)
            row.update(val_loss=ev.loss, val_pixel_acc=ev.report.pixel_accuracy, val_miou=ev.report.mean_iou)
            score = {"ce": ev.loss, "miou": ev.report.mean_iou, "accuracy": ev.report.pixel_accuracy}[t.checkpoint_by]
            if result.best_step < 0 or better(score, result.best_score):
                result.best_step, result.best_score = step + 1, score
                if out is not None:
                    ckpt_io.save(out / "best.ckpt", model_checkpoint(model, cfg, step + 1))
            result.final = ev
            log.info("step %d loss %.4f val_acc %.4f val_miou %.4f", step + 1, loss.item(),
                     ev.report.pixel_accuracy, ev.report.mean_iou)
        result.curve.append(row)
    if out is not None:
        ckpt_io.save(out / "last.ckpt", model_checkpoint(model, cfg, end, state))
        atomic_write(out / "curve.csv", curve_csv(result.curve))
        if result.final is not None:
            atomic_write(out / "metrics.csv", result.final.report.to_csv())
    return result


CURVE_FIELDS = ("step", "lr", "loss", "train_acc", "val_loss", "val_pixel_acc", "val_miou")


def curve_csv(rows: list[dict]) -> str:
    lines = [",".join(CURVE_FIELDS)]
    for r in rows:
        lines.append(",".join("" if r.get(k) is None else (str(r[k]) if k == "step" else f"{r[k]:.8g}")
                              for k in CURVE_FIELDS))
    return "\n".join(lines) + "\n"
