"""Cross-scale fusion of selected watermark/cover pairs.

Each selected pair map goes through routed multi-head attention (some heads
always on, the rest picked per token by a router), then a routed expert
feed-forward layer with a residual connection. The refined maps of one
watermark scale are summed with their selection weights and projected back to
the codebook width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .pyramid import bilinear_resize


@dataclass
class MoHConfig:
    total_heads: int = 8
    shared_heads: int = 3
    active_routed_heads: int = 3
    head_dim: int = 8

    def __post_init__(self):
        routed = self.total_heads - self.shared_heads
        if self.total_heads < 1 or self.head_dim < 1 or self.shared_heads < 0:
            raise ConfigError(f"invalid head config {self}")
        if not 0 <= self.active_routed_heads <= routed:
            raise ConfigError(f"active_routed_heads must be in [0, {routed}], got {self.active_routed_heads}")
        if self.shared_heads + self.active_routed_heads < 1:
            raise ConfigError("at least one head must be active per token")

    @property
    def routed_heads(self) -> int:
        return self.total_heads - self.shared_heads


@dataclass
class MoEConfig:
    num_experts: int = 4
    active_experts: int = 1
    expansion: int = 4

    def __post_init__(self):
        if not 1 <= self.active_experts <= self.num_experts:
            raise ConfigError(
                f"need 1 <= active_experts <= num_experts, got {self.active_experts}/{self.num_experts}"
            )
        if self.expansion < 1:
            raise ConfigError("expansion must be >= 1")


@dataclass
class RoutingTrace:
    """Per-token gates from one routed layer; tokens are flattened to ``[T, ...]``."""

    head_gates: Optional[Tensor] = None  # [T, H]
    expert_gates: Optional[Tensor] = None  # [T, N], sparse
    expert_probs: Optional[Tensor] = None  # [T, N], softmax over all experts

    def expert_counts(self) -> Tensor:
        """Tokens per expert by argmax gate (lowest index on ties)."""
        n = self.expert_gates.shape[-1]
        return torch.bincount(self.expert_gates.detach().argmax(-1), minlength=n)

    def summary(self) -> dict:
        out = {}
        if self.head_gates is not None:
            out["head_activation"] = (self.head_gates > 0).float().mean(0).tolist()
        if self.expert_gates is not None:
            counts = self.expert_counts().float()
            out["expert_load"] = (counts / counts.sum()).tolist()
        return out


def _topk_mask(logits: Tensor, k: int) -> Tensor:
    """0/1 mask of the ``k`` largest logits along the last axis, lowest index on ties."""
    mask = torch.zeros_like(logits)
    if k == 0:
        return mask
    idx = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return mask.scatter_(-1, idx, 1.0)


def _to_tokens(x: Tensor) -> Tensor:
    return x.flatten(2).transpose(1, 2)  # [B, T, C]


def _from_tokens(t: Tensor, size) -> Tensor:
    b, _, c = t.shape
    return t.transpose(1, 2).reshape(b, c, *size)


class MoHAttention(nn.Module):
    """Self-attention whose heads are mixed by per-token gates.

    Shared heads get ``alpha_s * softmax(shared logits)``; routed heads get
    ``alpha_r * softmax(routed logits)`` masked to the top ``active_routed_heads``.
    ``(alpha_s, alpha_r)`` is itself a per-token softmax; with only one head
    group present its factor is 1.
    """

    def __init__(self, dim: int, cfg: MoHConfig):
        super().__init__()
        self.cfg = cfg
        h, hd = cfg.total_heads, cfg.head_dim
        self.qkv = nn.Linear(dim, 3 * h * hd)
        self.out_proj = nn.Parameter(torch.empty(h, hd, dim))
        nn.init.normal_(self.out_proj, std=1.0 / math.sqrt(h * hd))
        self.shared_router = nn.Linear(dim, cfg.shared_heads, bias=False) if cfg.shared_heads else None
        self.routed_router = nn.Linear(dim, cfg.routed_heads, bias=False) if cfg.routed_heads else None
        both = cfg.shared_heads and cfg.routed_heads
        self.balance = nn.Linear(dim, 2, bias=False) if both else None

    def gates(self, tokens: Tensor) -> Tensor:
        """``[B, T, H]`` head gates for ``[B, T, C]`` tokens."""
        parts = []
        alpha = torch.softmax(self.balance(tokens), dim=-1) if self.balance is not None else None
        if self.shared_router is not None:
            g = torch.softmax(self.shared_router(tokens), dim=-1)
            parts.append(g * alpha[..., 0:1] if alpha is not None else g)
        if self.routed_router is not None:
            logits = self.routed_router(tokens)
            g = torch.softmax(logits, dim=-1) * _topk_mask(logits, self.cfg.active_routed_heads)
            parts.append(g * alpha[..., 1:2] if alpha is not None else g)
        return torch.cat(parts, dim=-1)

    def attention(self, tokens: Tensor):
        """Per-head outputs ``[B, H, T, C]`` and attention weights ``[B, H, T, T]``."""
        b, t, _ = tokens.shape
        h, hd = self.cfg.total_heads, self.cfg.head_dim
        q, k, v = self.qkv(tokens).reshape(b, t, 3, h, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        heads = torch.einsum("bhtd,hdc->bhtc", attn @ v, self.out_proj)
        return heads, attn

    def forward(self, x: Tensor, return_attention: bool = False):
        size = x.shape[-2:]
        tokens = _to_tokens(x)
        heads, attn = self.attention(tokens)
        g = self.gates(tokens)
        out = torch.einsum("bhtc,bth->btc", heads, g)
        trace = RoutingTrace(head_gates=g.reshape(-1, g.shape[-1]))
        result = (_from_tokens(out, size), trace)
        return result + (attn,) if return_attention else result


class MoEFeedForward(nn.Module):
    """Routed expert FFN with residual: ``out = sum_n g_n * expert_n(x) + x``.

    Gates are a softmax over the selected experts' router logits.
    """

    def __init__(self, dim: int, cfg: MoEConfig):
        super().__init__()
        self.cfg = cfg
        self.router = nn.Linear(dim, cfg.num_experts, bias=False)
        self.experts = nn.ModuleList(
            nn.Sequential(nn.Linear(dim, cfg.expansion * dim), nn.GELU(), nn.Linear(cfg.expansion * dim, dim))
            for _ in range(cfg.num_experts)
        )

    def route(self, tokens: Tensor):
        logits = self.router(tokens)
        probs = torch.softmax(logits, dim=-1)
        mask = _topk_mask(logits, self.cfg.active_experts)
        masked = logits.masked_fill(mask == 0, float("-inf"))
        gates = torch.softmax(masked, dim=-1) * mask
        return gates, probs

    def mixture(self, tokens: Tensor, gates: Tensor) -> Tensor:
        mix = torch.zeros_like(tokens)
        for n, expert in enumerate(self.experts):
            mix = mix + gates[..., n : n + 1] * expert(tokens)
        return mix

    def forward(self, x: Tensor):
        size = x.shape[-2:]
        tokens = _to_tokens(x)
        gates, probs = self.route(tokens)
        out = self.mixture(tokens, gates) + tokens
        trace = RoutingTrace(
            expert_gates=gates.reshape(-1, gates.shape[-1]),
            expert_probs=probs.reshape(-1, probs.shape[-1]),
        )
        return _from_tokens(out, size), trace


def fuse_scale(
    selected: Sequence[Tensor],
    weights: Tensor,
    target_size,
    projection: Optional[nn.Module] = None,
) -> Tensor:
    """Weighted sum of the selected maps at ``target_size``, then the channel projection.

    ``weights`` is ``[B, k]`` (or ``[k]``) with one column per selected map.
    """
    if weights.shape[-1] != len(selected):
        raise ShapeError(f"{len(selected)} maps but {weights.shape[-1]} weights")
    acc = None
    for s, m in enumerate(selected):
        w = weights[..., s].reshape(-1, 1, 1, 1) if weights.dim() > 1 else weights[s]
        term = w * bilinear_resize(m, target_size)
        acc = term if acc is None else acc + term
    return projection(acc) if projection is not None else acc


def collect_balance_stats(traces: Sequence[RoutingTrace]):
    """``(load, P)`` over every routed token: argmax-expert fractions and mean router probabilities."""
    gates = [t.expert_gates for t in traces if t.expert_gates is not None and t.expert_gates.numel()]
    probs = [t.expert_probs for t in traces if t.expert_probs is not None and t.expert_probs.numel()]
    if not gates:
        raise ValueError("no routed tokens to collect balance statistics from")
    gates = torch.cat(gates)
    probs = torch.cat(probs)
    n = gates.shape[-1]
    counts = torch.bincount(gates.detach().argmax(-1), minlength=n).to(probs.dtype)
    load = counts / counts.sum()
    return load, probs.mean(0)


WATERMARK_GAIN = 1.0


class CrossScaleFusion(nn.Module):
    """Runs the selected pairs of every watermark scale through MoH and MoE and fuses them.

    One set of attention/expert/projection parameters is shared by all scales.
    ``attention_residual`` adds the input back around the attention block.
    """

    def __init__(
        self,
        feature_dim: int,
        moh: MoHConfig = None,
        moe: MoEConfig = None,
        attention_residual: bool = True,
    ):
        super().__init__()
        dim = 2 * feature_dim
        self.attention_residual = attention_residual
        self.moh = MoHAttention(dim, moh or MoHConfig())
        self.moe = MoEFeedForward(dim, moe or MoEConfig())
        self.proj = nn.Conv2d(dim, feature_dim, 1)
        self.reset_to_passthrough()

    @torch.no_grad()
    def reset_to_passthrough(self, watermark_gain: float = WATERMARK_GAIN) -> None:
        """Start as (almost) a pass-through: the attention and expert branches output
        zero, so refined maps equal their inputs, and the projection keeps the cover
        channels plus a copy of the watermark channels scaled by ``watermark_gain``."""
        d = self.proj.out_channels
        nn.init.zeros_(self.moh.out_proj)
        for expert in self.moe.experts:
            nn.init.zeros_(expert[-1].weight)
            nn.init.zeros_(expert[-1].bias)
        eye = torch.eye(d)
        self.proj.weight.copy_(torch.cat([watermark_gain * eye, eye], dim=1)[..., None, None])
        nn.init.zeros_(self.proj.bias)

    def refine(self, a: Tensor):
        b, head_trace = self.moh(a)
        if self.attention_residual:
            b = b + a
        b_star, expert_trace = self.moe(b)
        return b_star, head_trace, expert_trace

    def forward(self, pairs, plan):
        """Returns the fused maps ``R_i`` (``[B, d, h_i, w_i]``) and the routing traces."""
        batch = plan.weights.shape[0]
        rows = torch.arange(batch, device=plan.weights.device)
        sel_w = plan.selected_weights()
        fused, traces = [], []
        for i, row in enumerate(pairs):
            stacked = torch.stack(row, dim=1)  # [B, K, 2d, h_i, w_i]
            chosen = [stacked[rows, plan.topk[:, i, s]] for s in range(plan.k)]
            b_star, head_trace, expert_trace = self.refine(torch.cat(chosen, dim=0))
            traces += [head_trace, expert_trace]
            selected = list(b_star.split(batch, dim=0))
            fused.append(fuse_scale(selected, sel_w[:, i], tuple(row[0].shape[-2:]), self.proj))
        return fused, traces
