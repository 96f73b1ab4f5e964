"""The assembled embedder: two encoders, shared codebook, selection, fusion, refinement, decoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass

from torch import Tensor, nn

from .asim import AdaptiveScaleInteraction, SelectionPlan
from .config import ModelConfig
from .csfm import CrossScaleFusion
from .extractor import WatermarkExtractor
from .faem import FusionAttentionEnhancement
from .pyramid import Encoder, MultiScaleVQVAE, ResidualPyramid, ScaleSchedule


@dataclass
class EmbedResult:
    watermarked: Tensor
    features: Tensor
    cover_pyramid: ResidualPyramid
    watermark_pyramid: ResidualPyramid
    plan: SelectionPlan
    fused: list
    traces: list


class WatermarkModel(nn.Module):
    def __init__(self, cfg: ModelConfig = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        schedule = ScaleSchedule.square(cfg.scales)
        self.vq = MultiScaleVQVAE(cfg.feature_dim, cfg.codebook_size, schedule, cfg.channels)
        self.watermark_encoder = Encoder(cfg.feature_dim, cfg.channels)
        self.asim = AdaptiveScaleInteraction(cfg.feature_dim, cfg.select_k, cfg.fixed_scales)
        self.csfm = CrossScaleFusion(cfg.feature_dim, cfg.moh, cfg.moe, cfg.attention_residual)
        self.faem = FusionAttentionEnhancement(cfg.feature_dim, len(schedule), cfg.faem_shared)
        self.extractor = WatermarkExtractor(cfg.extractor)

    @property
    def schedule(self) -> ScaleSchedule:
        return self.vq.schedule

    def sync_watermark_encoder(self) -> None:
        """Initialise the watermark branch from the (pretrained) image encoder."""
        self.watermark_encoder.load_state_dict(copy.deepcopy(self.vq.encoder.state_dict()))

    def embed(self, cover: Tensor, watermark: Tensor) -> EmbedResult:
        self.vq.check_image(cover)
        self.vq.check_image(watermark)
        cover_pyr = self.vq.quantize(self.vq.encode_image(cover), straight_through=True)
        wm_pyr = self.vq.quantize(self.watermark_encoder(watermark), straight_through=True)
        pairs, plan = self.asim(wm_pyr.embedded(), cover_pyr.embedded())
        fused, traces = self.csfm(pairs, plan)
        features = self.faem(fused, self.schedule.full)
        image = self.vq.decode_features(features)
        return EmbedResult(image, features, cover_pyr, wm_pyr, plan, fused, traces)

    def forward(self, cover: Tensor, watermark: Tensor) -> Tensor:
        return self.embed(cover, watermark).watermarked

    def extract(self, image: Tensor) -> Tensor:
        return self.extractor(image)
