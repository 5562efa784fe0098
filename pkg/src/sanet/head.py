"""Pipeline fusion, pyramid pooling and the pixel classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .ops import adaptive_avg_pool, bilinear_resize, concat_channels, conv2d
from .tensor import SeededRng, ShapeError, Tensor, add, alloc, he_init

FULL_BINS = ((60, 60), (30, 30), (20, 20), (15, 15), (10, 10))
DESK_BINS = ((6, 6), (3, 3), (2, 2), (1, 1))
FUSION_MODES = ("concat", "add", "aggregated")


def clamp_bins(bins: Sequence[tuple[int, int]], h: int, w: int) -> list[tuple[int, int]]:
    """Clamp each bin extent to the feature extent."""
    return [(min(bh, h), min(bw, w)) for bh, bw in bins]


def psp_channels(c_in: int, n_bins: int, reduce_channels: int) -> int:
    return c_in + n_bins * reduce_channels


@dataclass
class PSPModule:
    bins: list[tuple[int, int]]
    kernels: list[Tensor]  # one (reduce, c_in, 1, 1) per bin

    @classmethod
    def create(cls, c_in: int, bins: Sequence[tuple[int, int]], reduce_channels: int,
               rng: SeededRng) -> "PSPModule":
        if reduce_channels < 1:
            raise ValueError("reduce_channels must be >= 1")
        if not bins:
            raise ValueError("PSP needs at least one bin")
        kernels = []
        for i, _ in enumerate(bins):
            k = he_init((reduce_channels, c_in, 1, 1), c_in, rng.child(i))
            k.requires_grad = True
            kernels.append(k)
        return cls([tuple(b) for b in bins], kernels)

    @property
    def reduce_channels(self) -> int:
        return self.kernels[0].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {f"branch{i}.weight": k for i, k in enumerate(self.kernels)}


def psp_forward(feature: Tensor, psp: PSPModule) -> Tensor:
    """Concatenate ``feature`` with one pooled-projected-upsampled branch per bin."""
    h, w = feature.shape[2], feature.shape[3]
    branches = [feature]
    for (bh, bw), kernel in zip(clamp_bins(psp.bins, h, w), psp.kernels):
        pooled = adaptive_avg_pool(feature, bh, bw)
        branches.append(bilinear_resize(conv2d(pooled, kernel), h, w))
    return concat_channels(branches)


@dataclass
class Head:
    psp: PSPModule
    classifier: Tensor  # (num_classes, c_psp, 3, 3)
    classifier_bias: Tensor
    fusion: str = "concat"

    @classmethod
    def create(cls, stem_channels: int, agg_channels: int, num_classes: int,
               bins: Sequence[tuple[int, int]], reduce_channels: int, rng: SeededRng,
               fusion: str = "concat") -> "Head":
        c_in = fused_channels(stem_channels, agg_channels, fusion)
        psp = PSPModule.create(c_in, bins, reduce_channels, rng.child(0))
        c_psp = psp_channels(c_in, len(bins), reduce_channels)
        classifier = he_init((num_classes, c_psp, 3, 3), c_psp * 9, rng.child(1))
        classifier.requires_grad = True
        bias = alloc((num_classes,), 0.0)
        bias.requires_grad = True
        return cls(psp, classifier, bias, fusion)

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        params = {f"psp.{k}": v for k, v in self.psp.parameters().items()}
        params["classifier.weight"] = self.classifier
        params["classifier.bias"] = self.classifier_bias
        return params


def fused_channels(stem_channels: int, agg_channels: int, fusion: str) -> int:
    if fusion == "concat":
        return stem_channels + agg_channels
    if fusion == "add":
        if stem_channels != agg_channels:
            raise ShapeError(f"add fusion needs equal channels, got {stem_channels} and {agg_channels}")
        return stem_channels
    if fusion == "aggregated":
        return agg_channels
    raise ValueError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")


def fuse(stem_final: Tensor, aggregated: Tensor, fusion: str) -> Tensor:
    if stem_final.shape[0] != aggregated.shape[0] or stem_final.shape[2:] != aggregated.shape[2:]:
        raise ShapeError(f"pipelines disagree: {stem_final.shape} vs {aggregated.shape}")
    if fusion == "concat":
        return concat_channels([stem_final, aggregated])
    if fusion == "add":
        return add(stem_final, aggregated)
    if fusion == "aggregated":
        return aggregated
    raise ValueError(f"unknown fusion mode {fusion!r}")


def fuse_and_classify(stem_final: Tensor, aggregated: Tensor, head: Head,
                      out_extents: tuple[int, int]) -> Tensor:
    """Fuse the two pipelines, apply PSP, classify with a 3x3 conv and upsample."""
    fused = fuse(stem_final, aggregated, head.fusion)
    feats = psp_forward(fused, head.psp)
    logits = conv2d(feats, head.classifier, head.classifier_bias, padding=1)
    return bilinear_resize(logits, out_extents[0], out_extents[1])
