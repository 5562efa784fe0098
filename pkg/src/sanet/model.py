"""Full scene-parsing network: backbone, aggregation pipeline and PSP head."""

from __future__ import annotations

from .aggregator import AggregatorConfig, aggregate
from .backbone import Backbone, BackboneConfig, StageConfig
from .config import ModelConfig
from .head import Head, fuse_and_classify
from .tensor import SeededRng, Tensor, default_dtype


def backbone_config(cfg: ModelConfig) -> BackboneConfig:
    lens = {len(cfg.stage_blocks), len(cfg.stage_channels), len(cfg.stage_strides), len(cfg.stage_dilations)}
    if lens != {4}:
        raise ValueError("stage_blocks/channels/strides/dilations must each list four stages")
    stages = [StageConfig(b, c, cfg.cardinality, s, d) for b, c, s, d in
              zip(cfg.stage_blocks, cfg.stage_channels, cfg.stage_strides, cfg.stage_dilations)]
    return BackboneConfig(cfg.stem_channels, stages, cfg.norm, cfg.gn_group_channels)


class SANet:
    """Backbone and aggregation pipelines fused ahead of a PSP classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        rng = SeededRng(seed)
        with default_dtype(dtype or "float64"):
            self.backbone = Backbone(backbone_config(config), rng.child(0))
            all_channels = self.backbone.config.tap_channels()
            unknown = [t for t in config.taps if t not in all_channels]
            if unknown:
                raise ValueError(f"unknown taps {unknown}")
            tap_channels = {t: all_channels[t] for t in config.taps}
            c_prime = config.agg_channels
            self.aggregator = AggregatorConfig.create(tap_channels, (c_prime, 1, 1), rng.child(1),
                                                      config.lstm_kernel, config.lstm_dilation)
            final_channels = config.stage_channels[-1]
            self.head = Head.create(final_channels, c_prime, config.num_classes, config.bins,
                                    config.psp_reduce, rng.child(2), config.fusion)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        params.update({f"aggregator.{k}": v for k, v in self.aggregator.parameters().items()})
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def features(self, image: Tensor):
        out = self.backbone(image)
        index = {f"s{i}": t for i, t in enumerate(out.taps)}
        final = out.final
        target = (self.config.agg_channels, final.shape[2], final.shape[3])
        aggregated = aggregate([index[t] for t in self.config.taps], self.aggregator, target=target)
        return out, aggregated

    def __call__(self, image: Tensor) -> Tensor:
        out, aggregated = self.features(image)
        return fuse_and_classify(out.final, aggregated, self.head, (image.shape[2], image.shape[3]))
