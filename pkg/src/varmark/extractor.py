"""U-Net watermark extractor with self-attention at the bottleneck."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError


@dataclass
class ExtractorConfig:
    depth: int = 3
    base_channels: int = 32
    bottleneck_attention: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError(f"invalid extractor config {self}")


def _block(cin: int, cout: int) -> nn.Sequential:
    # no per-image normalisation: it would discard the absolute colour levels the mark is carried in
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.SiLU(),
    )


class BottleneckAttention(nn.Module):
    """Single-head self-attention over the bottleneck grid, with a residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, num_heads=1, batch_first=True)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        t = self.norm(x.flatten(2).transpose(1, 2))
        y, _ = self.attn(t, t, t, need_weights=False)
        return x + y.transpose(1, 2).reshape(b, c, h, w)


class WatermarkExtractor(nn.Module):
    """``[B, 3, H, W]`` watermarked image -> ``[B, 3, H, W]`` recovered watermark in (0, 1)."""

    def __init__(self, cfg: ExtractorConfig = None):
        super().__init__()
        cfg = cfg or ExtractorConfig()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = 3
        for c in chans[:-1]:
            self.down.append(_block(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _block(chans[-2], chans[-1])
        self.attn = BottleneckAttention(chans[-1]) if cfg.bottleneck_attention else nn.Identity()
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c_hi, c in zip(chans[:0:-1], chans[-2::-1]):
            self.up.append(nn.ConvTranspose2d(c_hi, c, 2, stride=2))
            self.dec.append(_block(2 * c, c))
        self.head = nn.Conv2d(chans[0], 3, 1)

    def forward(self, image: Tensor) -> Tensor:
        m = 2**self.cfg.depth
        if image.dim() != 4 or image.shape[-2] % m or image.shape[-1] % m:
            raise ShapeError(f"image size {tuple(image.shape[-2:])} must be divisible by {m}")
        skips = []
        x = image
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.attn(self.bottleneck(x))
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


def extract_watermark(extractor: WatermarkExtractor, image: Tensor) -> Tensor:
    return extractor(image)
