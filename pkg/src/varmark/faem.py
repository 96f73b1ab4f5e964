"""Spatial-then-channel gating of fused residual maps and their aggregation."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .pyramid import bilinear_resize


class SpatialAttention(nn.Module):
    """Per-position gate from channel mean/max descriptors through a conv and a sigmoid."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def mask(self, x: Tensor) -> Tensor:
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(desc))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.mask(x)


class ChannelAttention(nn.Module):
    """Per-channel gate from avg- and max-pooled descriptors through a bottleneck MLP."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def weights(self, x: Tensor) -> Tensor:
        """``[B, C]`` channel gates in (0, 1)."""
        return torch.sigmoid(self.mlp(x.mean(dim=(-2, -1))) + self.mlp(x.amax(dim=(-2, -1))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.weights(x)[..., None, None]


def aggregate(maps: Sequence[Tensor], size) -> Tensor:
    """Upsample every map to ``size`` and sum them."""
    out = bilinear_resize(maps[0], size)
    for m in maps[1:]:
        out = out + bilinear_resize(m, size)
    return out


OPEN_GATE_BIAS = 3.0


class FusionAttentionEnhancement(nn.Module):
    """Refines each fused map (spatial then channel gate) and aggregates to a full-size feature map.

    With ``shared=False`` every scale gets its own pair of gates.
    """

    def __init__(self, feature_dim: int, num_scales: int, shared: bool = True):
        super().__init__()
        self.shared = shared
        n = 1 if shared else num_scales
        self.spatial = nn.ModuleList(SpatialAttention() for _ in range(n))
        self.channel = nn.ModuleList(ChannelAttention(feature_dim) for _ in range(n))
        with torch.no_grad():
            # gates start nearly open (sigmoid(3) ~ 0.95)
            for sp, ch in zip(self.spatial, self.channel):
                sp.conv.bias.fill_(OPEN_GATE_BIAS)
                ch.mlp[-1].bias.fill_(OPEN_GATE_BIAS / 2)

    def refine(self, maps: Sequence[Tensor]) -> list:
        out = []
        for i, r in enumerate(maps):
            j = 0 if self.shared else i
            out.append(self.channel[j](self.spatial[j](r)))
        return out

    def forward(self, maps: Sequence[Tensor], size) -> Tensor:
        return aggregate(self.refine(maps), size)
