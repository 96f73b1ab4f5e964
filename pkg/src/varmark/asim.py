"""Adaptive scale selection between watermark and cover residual pyramids.

Every watermark scale ``i`` is paired with every cover scale ``j``; a small
perceptron scores each pair and a softmax over ``j`` turns the scores into
selection weights. The ``k`` highest-weighted cover scales per watermark scale
are kept for fusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .pyramid import bilinear_resize


def pair(watermark_map: Tensor, cover_map: Tensor) -> Tensor:
    """Concatenate ``cover_map`` (resized to the watermark map's grid) after ``watermark_map``.

    Both inputs are ``[B, d, h, w]``; the result is ``[B, 2d, h_i, w_i]``.
    """
    if watermark_map.shape[1] != cover_map.shape[1]:
        raise ShapeError(
            f"embedding dims differ: watermark {watermark_map.shape[1]}, cover {cover_map.shape[1]}"
        )
    resized = bilinear_resize(cover_map, tuple(watermark_map.shape[-2:]))
    return torch.cat([watermark_map, resized], dim=1)


def pair_all(watermark_maps: Sequence[Tensor], cover_maps: Sequence[Tensor]) -> list:
    """``pairs[i][j] = pair(M_i, C_j)`` for all scale combinations."""
    return [[pair(m, c) for c in cover_maps] for m in watermark_maps]


@dataclass
class SelectionPlan:
    weights: Tensor  # [B, K, K], rows sum to one
    topk: Tensor  # [B, K, k] long, 0-based cover-scale indices, descending weight
    k: int

    def selected_weights(self) -> Tensor:
        """``[B, K, k]`` weights at the selected indices."""
        return torch.gather(self.weights, 2, self.topk)

    def mask(self) -> Tensor:
        """``[B, K, K]`` 0/1 mask of selected pairs."""
        m = torch.zeros_like(self.weights)
        return m.scatter_(2, self.topk, 1.0)


def topk_select(weights: Tensor, k: int) -> SelectionPlan:
    """Keep the ``k`` largest entries of each row; equal weights favour the lower index."""
    n = weights.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    squeeze = weights.dim() == 2
    w = weights.unsqueeze(0) if squeeze else weights
    order = torch.sort(w.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    if squeeze:
        return SelectionPlan(weights=weights, topk=order[0], k=k)
    return SelectionPlan(weights=weights, topk=order, k=k)


def fixed_plan(weights: Tensor, scales: Sequence[int]) -> SelectionPlan:
    """Plan that ignores the scores and uses the same cover scales for every row."""
    idx = torch.as_tensor(list(scales), dtype=torch.long, device=weights.device)
    topk = idx.expand(*weights.shape[:-1], len(scales)).contiguous()
    return SelectionPlan(weights=weights, topk=topk, k=len(scales))


class ScaleSelector(nn.Module):
    """Pooled-pair scorer (``2d -> 4d -> 1``) with row-wise softmax."""

    def __init__(self, feature_dim: int, hidden_mult: int = 2):
        super().__init__()
        c = 2 * feature_dim
        self.mlp = nn.Sequential(
            nn.Linear(c, hidden_mult * c),
            nn.GELU(),
            nn.Linear(hidden_mult * c, 1),
        )

    def logits(self, pairs: Sequence[Sequence[Tensor]]) -> Tensor:
        pooled = torch.stack(
            [torch.stack([a.mean(dim=(-2, -1)) for a in row], dim=1) for row in pairs], dim=1
        )  # [B, K, K, 2d]
        return self.mlp(pooled).squeeze(-1)

    def forward(self, pairs: Sequence[Sequence[Tensor]]) -> Tensor:
        return torch.softmax(self.logits(pairs), dim=-1)


def selection_weights(pairs: Sequence[Sequence[Tensor]], selector: ScaleSelector) -> Tensor:
    return selector(pairs)


class AdaptiveScaleInteraction(nn.Module):
    """Pairs both pyramids, scores them, and returns the pairs plus a :class:`SelectionPlan`.

    ``fixed_scales`` switches to a fixed cover-scale set (ablation baseline); the
    weights are still produced by the selector.
    """

    def __init__(self, feature_dim: int, k: int = 4, fixed_scales: Optional[Sequence[int]] = None):
        super().__init__()
        self.k = k
        self.fixed_scales = tuple(fixed_scales) if fixed_scales is not None else None
        self.selector = ScaleSelector(feature_dim)

    def forward(self, watermark_maps: Sequence[Tensor], cover_maps: Sequence[Tensor]):
        if len(watermark_maps) != len(cover_maps):
            raise ShapeError("watermark and cover pyramids have different scale counts")
        pairs = pair_all(watermark_maps, cover_maps)
        weights = self.selector(pairs)
        if self.fixed_scales is not None:
            plan = fixed_plan(weights, self.fixed_scales)
        else:
            plan = topk_select(weights, self.k)
        return pairs, plan
