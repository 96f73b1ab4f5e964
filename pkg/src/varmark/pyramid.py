"""Multi-scale residual vector quantization.

An image is encoded to a feature map ``F`` of shape ``[B, d, h, w]``, which is
quantized into ``K`` residual maps over a shared codebook. Summing the maps
after upsampling each to ``(h, w)`` gives back the quantized approximation of
``F``; the decoder turns that sum into an image.

All maps are channel-first torch tensors. Upsampling uses :func:`bilinear_resize`
everywhere; downsampling the running residual uses area averaging.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError

Size = Tuple[int, int]


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> Tensor:
    """``[n_out, n_in]`` corner-aligned linear interpolation weights (float64)."""
    mat = torch.zeros(n_out, n_in, dtype=torch.float64)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        positions = [(n_in - 1) / 2.0]
    else:
        step = (n_in - 1) / (n_out - 1)
        positions = [i * step for i in range(n_out)]
    for i, pos in enumerate(positions):
        lo = min(int(pos), n_in - 2)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, lo + 1] += frac
    return mat


def bilinear_resize(x: Tensor, size: Size) -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` with bilinear interpolation.

    Sampling is corner-aligned: output pixel ``i`` reads input coordinate
    ``i * (n_in - 1) / (n_out - 1)``, and a length-1 output reads the input centre.
    Resizing to the current size returns ``x`` unchanged.
    """
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"cannot resize {tuple(x.shape[-2:])} to {(h, w)}")
    a, b = x.shape[-2], x.shape[-1]
    if (a, b) == (h, w):
        return x
    mh = _interp_matrix(a, h).to(dtype=x.dtype, device=x.device)
    mw = _interp_matrix(b, w).to(dtype=x.dtype, device=x.device)
    return mh @ x @ mw.transpose(0, 1)


def area_downsample(x: Tensor, size: Size) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.adaptive_avg_pool2d(x, size)


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered per-scale resolutions ``(h_k, w_k)``; the last one is the full feature size."""

    sizes: Tuple[Size, ...]

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ConfigError("scale schedule needs at least one scale")
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 < h0 or w1 < w0:
                raise ConfigError(f"scale schedule must be non-decreasing, got {sizes}")
        if min(min(s) for s in sizes) < 1:
            raise ConfigError(f"scale sizes must be positive, got {sizes}")

    @classmethod
    def square(cls, sides: Sequence[int]) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides))

    @property
    def full(self) -> Size:
        return self.sizes[-1]

    def __len__(self) -> int:
        return len(self.sizes)

    def __getitem__(self, k: int) -> Size:
        return self.sizes[k]

    def check_features(self, features: Tensor) -> None:
        if tuple(features.shape[-2:]) != self.full:
            raise ShapeError(
                f"schedule ends at {self.full} but feature map is {tuple(features.shape[-2:])}"
            )


@dataclass
class ResidualMap:
    indices: Tensor  # [B, h_k, w_k] long
    embedded: Tensor  # [B, d, h_k, w_k]

    @property
    def size(self) -> Size:
        return tuple(self.indices.shape[-2:])


@dataclass
class ResidualPyramid:
    maps: list
    schedule: ScaleSchedule
    # running residual left after the last scale; kept for diagnostics
    residual: Optional[Tensor] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, k: int) -> ResidualMap:
        return self.maps[k]

    def embedded(self) -> list:
        return [m.embedded for m in self.maps]


def nearest_codes(x: Tensor, codebook: Tensor) -> Tensor:
    """Index of the nearest codebook row for every position of ``x`` ``[B, d, h, w]``.

    Squared Euclidean distance; ties resolve to the lowest index.
    """
    b, d, h, w = x.shape
    if codebook.shape[1] != d:
        raise ShapeError(f"codebook dim {codebook.shape[1]} != feature dim {d}")
    flat = x.permute(0, 2, 3, 1).reshape(-1, 1, d)
    dist = ((flat - codebook.unsqueeze(0)) ** 2).sum(-1)
    # argmin returns the first minimum
    return dist.argmin(dim=1).reshape(b, h, w)


def quantize_pyramid(
    features: Tensor,
    codebook: Tensor,
    schedule: ScaleSchedule,
    straight_through: bool = False,
) -> ResidualPyramid:
    """Residual-quantize ``features`` into one token map per scale.

    With ``straight_through`` the embedded maps carry the gradient of the
    downsampled residual they replace (their values are then equal to the
    codebook rows only up to rounding).
    """
    schedule.check_features(features)
    full = schedule.full
    residual = features
    maps = []
    for size in schedule.sizes:
        down = area_downsample(residual, size)
        with torch.no_grad():
            idx = nearest_codes(down, codebook)
        emb = codebook[idx].permute(0, 3, 1, 2)
        if straight_through:
            emb = down + (emb - down).detach()
        maps.append(ResidualMap(indices=idx, embedded=emb))
        residual = residual - bilinear_resize(emb, full)
    return ResidualPyramid(maps=maps, schedule=schedule, residual=residual)


def reconstruct_features(pyramid: ResidualPyramid, k: Optional[int] = None) -> Tensor:
    """Cumulative sum of the first ``k`` residual maps upsampled to full resolution."""
    n = len(pyramid)
    k = n if k is None else k
    if not 1 <= k <= n:
        raise IndexError(f"k must be in [1, {n}], got {k}")
    full = pyramid.schedule.full
    out = bilinear_resize(pyramid[0].embedded, full)
    for i in range(1, k):
        out = out + bilinear_resize(pyramid[i].embedded, full)
    return out


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Strided conv stack: ``[B, 3, H, W] -> [B, d, H/8, W/8]``."""

    def __init__(self, feature_dim: int = 16, channels: Sequence[int] = (32, 64, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.stride = 8
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c2, c3, 4, stride=2, padding=1),
            _ResBlock(c3),
            nn.Conv2d(c3, c3, 4, stride=2, padding=1),
            _ResBlock(c3),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(c3, feature_dim, 1)

    def forward(self, image: Tensor) -> Tensor:
        return self.out(self.net(image))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; outputs pixels in ``(0, 1)`` through a sigmoid."""

    def __init__(self, feature_dim: int = 16, channels: Sequence[int] = (32, 64, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv2d(feature_dim, c3, 3, padding=1),
            _ResBlock(c3),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c3, c2, 3, padding=1),
            _ResBlock(c2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c1, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, 3, 3, padding=1),
        )

    def forward(self, features: Tensor) -> Tensor:
        return torch.sigmoid(self.net(features))


class MultiScaleVQVAE(nn.Module):
    """Encoder, shared codebook and decoder with a fixed scale schedule."""

    def __init__(
        self,
        feature_dim: int = 16,
        codebook_size: int = 512,
        schedule: ScaleSchedule = ScaleSchedule.square((1, 2, 3, 4, 6, 8)),
        channels: Sequence[int] = (32, 64, 64),
        commitment: float = 0.25,
    ):
        super().__init__()
        if codebook_size < 2 or feature_dim < 1:
            raise ConfigError("codebook needs V >= 2 entries of dimension d >= 1")
        self.schedule = schedule
        self.commitment = commitment
        self.encoder = Encoder(feature_dim, channels)
        self.decoder = Decoder(feature_dim, channels)
        self.codebook = nn.Embedding(codebook_size, feature_dim)
        nn.init.uniform_(self.codebook.weight, -1.0 / codebook_size, 1.0 / codebook_size)

    @property
    def stride(self) -> int:
        return self.encoder.stride

    def check_image(self, image: Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, H, W] image batch, got {tuple(image.shape)}")
        s = self.stride
        if image.shape[-2] % s or image.shape[-1] % s:
            raise ShapeError(f"image size {tuple(image.shape[-2:])} not divisible by stride {s}")

    def encode_image(self, image: Tensor) -> Tensor:
        self.check_image(image)
        return self.encoder(image)

    def quantize(self, features: Tensor, straight_through: bool = False) -> ResidualPyramid:
        return quantize_pyramid(features, self.codebook.weight, self.schedule, straight_through)

    def decode_features(self, features: Tensor) -> Tensor:
        return self.decoder(features)

    @torch.no_grad()
    def residual_vectors(self, features: Tensor, quantized: bool = True) -> list:
        """Downsampled residual vectors ``[N_k, d]`` seen at every scale.

        With ``quantized=False`` the running residual is reduced by the exact
        (unquantized) downsampled map, which needs no codebook.
        """
        full = self.schedule.full
        residual, out = features, []
        for size in self.schedule.sizes:
            down = area_downsample(residual, size)
            out.append(down.permute(0, 2, 3, 1).reshape(-1, down.shape[1]))
            step = self.codebook.weight[nearest_codes(down, self.codebook.weight)].permute(0, 3, 1, 2) if quantized else down
            residual = residual - bilinear_resize(step, full)
        return out

    @torch.no_grad()
    def seed_codebook(self, features: Tensor, generator: torch.Generator) -> None:
        """Fill the codebook with residual vectors drawn evenly across scales."""
        pools = self.residual_vectors(features, quantized=False)
        v = self.codebook.num_embeddings
        rows = []
        for k, pool in enumerate(pools):
            n = v // len(pools) + (1 if k < v % len(pools) else 0)
            rows.append(pool[torch.randint(len(pool), (n,), generator=generator)])
        self.codebook.weight.copy_(torch.cat(rows))

    @torch.no_grad()
    def restart_codes(self, dead: Tensor, features: Tensor, generator: torch.Generator) -> int:
        """Overwrite the codebook rows flagged in ``dead`` with live residual vectors."""
        idx = torch.nonzero(dead).flatten()
        if idx.numel() == 0:
            return 0
        pool = torch.cat(self.residual_vectors(features))
        self.codebook.weight[idx] = pool[torch.randint(len(pool), (idx.numel(),), generator=generator)]
        return idx.numel()

    def forward(self, image: Tensor):
        """Tokenizer training pass: returns ``(reconstruction, vq_loss, pyramid)``."""
        f = self.encode_image(image)
        pyramid = self.quantize(f.detach())
        f_hat = reconstruct_features(pyramid)
        vq_loss = F.mse_loss(f_hat, f.detach()) + self.commitment * F.mse_loss(f, f_hat.detach())
        f_st = f + (f_hat - f).detach()
        return self.decode_features(f_st), vq_loss, pyramid
