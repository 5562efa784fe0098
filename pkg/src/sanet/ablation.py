"""Layer-usage ablation: plain FCN vs single skip-connections vs auxiliary losses vs aggregation.

Every variant shares the dilated backbone and an FCN head (3x3 conv + GN +
ReLU, then a 1x1 classifier) applied to the last feature map:

* ``plain-fcn``: the head sees only the final map.
* ``skip-sK``: tap sK is resized to the final extents and concatenated.
* ``aux-sK``: an extra 1x1 classifier on sK adds a weighted loss term.
* ``aggregation``: the ConvLSTM-aggregated map is concatenated.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from .aggregator import AggregatorConfig, aggregate
from .backbone import Backbone, ConvUnit
from .config import RunConfig
from .model import backbone_config
from .ops import bilinear_resize, concat_channels, conv2d
from .synth import generate, to_arrays
from .tensor import SeededRng, Tape, Tensor, add, alloc, default_dtype, he_init, relu, scale
from .train import batch_indices
from .training import AdamWState, adamw_step, confusion_matrix, cross_entropy, poly_lr, report_from_confusion

TAPS = ("s0", "s1", "s2", "s3", "s4")
VARIANTS = ("plain-fcn",) + tuple(f"skip-{t}" for t in TAPS) + tuple(f"aux-{t}" for t in TAPS) + ("aggregation",)
CSV_FIELDS = ("variant", "seed", "final_miou", "epochs_to_threshold")


def _classifier(c_in: int, num_classes: int, rng: SeededRng) -> tuple[Tensor, Tensor]:
    w = he_init((num_classes, c_in, 1, 1), c_in, rng)
    b = alloc((num_classes,), 0.0)
    w.requires_grad = b.requires_grad = True
    return w, b


class AblationNet:
    """Backbone + FCN head wired according to ``variant``."""

    def __init__(self, variant: str, run: RunConfig, seed: int):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        mcfg = run.model
        rng = SeededRng(seed)
        with default_dtype("float64"):
            # child(0) matches the full model so every variant starts from the same backbone
            self.backbone = Backbone(backbone_config(mcfg), rng.child(0))
            channels = self.backbone.config.tap_channels()
            c_final = mcfg.stage_channels[-1]
            c_head = c_final
            self.aggregator = None
            self.aux = None
            self.tap = None
            if variant.startswith("skip-"):
                self.tap = variant[5:]
                c_head += channels[self.tap]
            elif variant.startswith("aux-"):
                self.tap = variant[4:]
                self.aux = _classifier(channels[self.tap], mcfg.num_classes, rng.child(3))
            elif variant == "aggregation":
                self.aggregator = AggregatorConfig.create(channels, (run.ablate.agg_channels, 1, 1), rng.child(1),
                                                          mcfg.lstm_kernel, mcfg.lstm_dilation)
                c_head += run.ablate.agg_channels
            hidden = max(c_final // 4, 1)
            self.head_conv = ConvUnit.create(c_head, hidden, 3, rng.child(2), norm=mcfg.norm,
                                             group_channels=mcfg.gn_group_channels)
            self.classifier = _classifier(hidden, mcfg.num_classes, rng.child(4))
        self.aux_weight = run.ablate.aux_weight

    def parameters(self) -> dict[str, Tensor]:
        params = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        if self.aggregator is not None:
            params.update({f"aggregator.{k}": v for k, v in self.aggregator.parameters().items()})
        params.update({f"head.conv.{k}": v for k, v in self.head_conv.parameters().items()})
        params["head.classifier.weight"], params["head.classifier.bias"] = self.classifier
        if self.aux is not None:
            params["aux.weight"], params["aux.bias"] = self.aux
        return params

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor | None]:
        """Main logits at input extents and, for aux variants, the auxiliary logits."""
        h, w = image.shape[2], image.shape[3]
        out = self.backbone(image)
        taps = {f"s{i}": t for i, t in enumerate(out.taps)}
        final = out.final
        fh, fw = final.shape[2], final.shape[3]
        feature = final
        aux_logits = None
        if self.variant.startswith("skip-"):
            feature = concat_channels([final, bilinear_resize(taps[self.tap], fh, fw)])
        elif self.aggregator is not None:
            agg = aggregate([taps[t] for t in TAPS], self.aggregator, target=(self.aggregator.target[0], fh, fw))
            feature = concat_channels([final, agg])
        elif self.aux is not None:
            aux_logits = bilinear_resize(conv2d(taps[self.tap], self.aux[0], self.aux[1]), h, w)
        logits = conv2d(relu(self.head_conv(feature)), self.classifier[0], self.classifier[1])
        return bilinear_resize(logits, h, w), aux_logits

    def __call__(self, image: Tensor) -> Tensor:
        return self.forward(image)[0]

    def loss(self, image: Tensor, labels: np.ndarray, ignore_index: int) -> Tensor:
        logits, aux_logits = self.forward(image)
        loss = cross_entropy(logits, labels, ignore_index)
        if aux_logits is not None:
            loss = add(loss, scale(cross_entropy(aux_logits, labels, ignore_index), self.aux_weight))
        return loss


@dataclass
class VariantRun:
    variant: str
    seed: int
    val_accuracy: list[float]  # mean class accuracy per epoch
    val_miou: list[float]

    @property
    def final_miou(self) -> float:
        return self.val_miou[-1]

    def epochs_to(self, threshold: float) -> float:
        """First epoch (1-based) with mean class accuracy >= threshold; inf if never reached."""
        for epoch, acc in enumerate(self.val_accuracy, start=1):
            if acc >= threshold:
                return float(epoch)
        return float("inf")


def ablation_data(run: RunConfig):
    a = run.ablate
    n = run.model.num_classes
    size = (a.image_size, a.image_size)
    train = to_arrays(generate(a.images, size, n, SeededRng(run.train.seed, 100)))
    val = to_arrays(generate(a.val_images, size, n, SeededRng(run.train.seed, 101)))
    return train, val


def _validate(net: AblationNet, images, labels, num_classes: int, ignore_index: int, batch: int):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in range(0, len(images), batch):
        logits = net(Tensor(images[s:s + batch]))
        conf += confusion_matrix(logits.data.argmax(1), labels[s:s + batch], num_classes, ignore_index)
    report = report_from_confusion(conf)
    return mean_class_accuracy(conf), report.mean_iou


def mean_class_accuracy(conf: np.ndarray) -> float:
    """Mean over ground-truth classes present of per-class recall (rows are labels)."""
    totals = conf.sum(axis=1)
    present = totals > 0
    return float((np.diag(conf)[present] / totals[present]).mean()) if present.any() else 0.0


def train_variant(variant: str, seed: int, run: RunConfig, data) -> VariantRun:
    """Fixed epoch budget, poly-decayed AdamW; validation after every epoch."""
    a = run.ablate
    (x, y), (vx, vy) = data
    net = AblationNet(variant, run, seed)
    params = net.parameters()
    state = AdamWState(weight_decay=run.train.weight_decay)
    steps_per_epoch = max(len(x) // a.batch, 1)
    total = steps_per_epoch * a.epochs
    ignore = run.data.ignore_index
    accs, mious = [], []
    for step in range(total):
        idx = batch_indices(step, a.batch, len(x), seed)
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            loss = net.loss(Tensor(x[idx]), y[idx], ignore)
        if not np.isfinite(loss.item()):
            from .train import NonFiniteLossError
            raise NonFiniteLossError(f"{variant}: non-finite loss at step {step} (batch indices {idx}, seed {seed})")
        tape.backward(loss)
        adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state,
                   poly_lr(step, total, a.lr, run.train.poly_power))
        if (step + 1) % steps_per_epoch == 0:
            acc, miou = _validate(net, vx, vy, run.model.num_classes, ignore, a.batch)
            accs.append(acc)
            mious.append(miou)
    return VariantRun(variant, seed, accs, mious)


@dataclass
class AblationResult:
    runs: list[VariantRun]
    thresholds: dict[int, float]  # seed -> accuracy threshold

    def rows(self) -> list[tuple[str, int, float, float]]:
        return [(r.variant, r.seed, r.final_miou, r.epochs_to(self.thresholds[r.seed])) for r in self.runs]

    def to_csv(self) -> str:
        lines = [",".join(CSV_FIELDS)]
        for variant, seed, miou, epochs in self.rows():
            lines.append(f"{variant},{seed},{miou:.6f},{'inf' if epochs == float('inf') else int(epochs)}")
        return "\n".join(lines) + "\n"

    def median_miou(self, variant: str) -> float:
        return statistics.median(m for v, _, m, _ in self.rows() if v == variant)

    def median_epochs(self, variant: str) -> float:
        return statistics.median(e for v, _, _, e in self.rows() if v == variant)


def run_ablation(run: RunConfig, variants=None, progress=None) -> AblationResult:
    """Train every variant for every seed; thresholds come from each seed's plain FCN."""
    variants = tuple(variants or run.ablate.variants or VARIANTS)
    if "plain-fcn" not in variants:
        variants = ("plain-fcn",) + variants
    data = ablation_data(run)
    runs, thresholds = [], {}
    for seed in run.ablate.seeds:
        for variant in variants:
            r = train_variant(variant, seed, run, data)
            if variant == "plain-fcn":
                thresholds[seed] = run.ablate.threshold_fraction * r.val_accuracy[-1]
            runs.append(r)
            if progress is not None:
                progress(r)
    return AblationResult(runs, thresholds)
