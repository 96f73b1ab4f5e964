"""Post-processing perturbations used to test watermark robustness.

Every attack maps ``[3, H, W]`` or ``[B, 3, H, W]`` tensors in ``[0, 1]`` to the
same shape and range. All randomness comes from ``numpy.random.default_rng(spec.seed)``,
consumed image by image, so an attack is a pure function of ``(image, spec)``.

Default parameters:

==========  =========================================================
crop        keep a random window with 70% of the area, resize back
rotate      uniform angle in [-40, 40] degrees, bilinear, zero fill
blur        9x9 Gaussian, sigma = 9 / 6
brightness  uniform additive shift in [-0.4, 0.4]
noise       additive Gaussian, sigma = 0.3
erase       zero a random rectangle covering 30% of the area
jpeg        encode/decode at quality 50
composite   each of the above with probability 0.5, in that order
==========  =========================================================
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torch import Tensor
from torch.nn import functional as F

from .errors import ConfigError

KINDS = ("crop", "rotate", "blur", "brightness", "noise", "erase", "jpeg", "composite")
BASIC_KINDS = KINDS[:-1]

DEFAULTS = {
    "identity": {},
    "crop": {"remove": 0.3},
    "rotate": {"max_angle": 40.0, "angle": None},
    "blur": {"kernel": 9, "sigma": None},
    "brightness": {"max_delta": 0.4},
    "noise": {"sigma": 0.3},
    "erase": {"area": 0.3},
    "jpeg": {"quality": 50},
    "composite": {"prob": 0.5},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ConfigError(f"unsupported attack kind {self.kind!r}; choose from {sorted(DEFAULTS)}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")

    def resolved(self) -> dict:
        return {**DEFAULTS[self.kind], **self.params}

    @property
    def label(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def parse_attack(text: str, seed: int = 0) -> AttackSpec:
    """Parse ``kind[:param=value,...]``."""
    kind, _, rest = text.partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq:
                raise ConfigError(f"attack parameter must be key=value, got {item!r}")
            params[key.strip()] = _number(value.strip())
    return AttackSpec(kind.strip(), params, seed)


def _number(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _crop(x: Tensor, rng, remove: float) -> Tensor:
    _, h, w = x.shape
    side = math.sqrt(1.0 - remove)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    window = x[:, top : top + ch, left : left + cw]
    return F.interpolate(window[None], size=(h, w), mode="bilinear", align_corners=False)[0]


def _rotate(x: Tensor, rng, max_angle: float, angle) -> Tensor:
    deg = float(rng.uniform(-max_angle, max_angle)) if angle is None else float(angle)
    rad = math.radians(deg)
    cos, sin = math.cos(rad), math.sin(rad)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=x.dtype)[None]
    grid = F.affine_grid(theta, [1, *x.shape], align_corners=False)
    return F.grid_sample(x[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def gaussian_kernel(size: int, sigma: float) -> Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(x: Tensor, rng, kernel: int, sigma) -> Tensor:
    sigma = kernel / 6.0 if sigma is None else sigma
    k = gaussian_kernel(kernel, sigma).to(x.dtype)
    c = x.shape[0]
    pad = kernel // 2
    y = F.pad(x[None], (pad, pad, pad, pad), mode="reflect")
    y = F.conv2d(y, k.reshape(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    y = F.conv2d(y, k.reshape(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    return y[0].clamp(0.0, 1.0)


def _brightness(x: Tensor, rng, max_delta: float) -> Tensor:
    return (x + float(rng.uniform(-max_delta, max_delta))).clamp(0.0, 1.0)


def _noise(x: Tensor, rng, sigma: float) -> Tensor:
    n = torch.from_numpy(rng.standard_normal(x.shape)).to(x.dtype)
    return (x + sigma * n).clamp(0.0, 1.0)


def erase_box(h: int, w: int, area: float, rng):
    """``(top, left, height, width)`` of a random rectangle with ``round(area*h*w)`` pixels (up to rounding)."""
    target = area * h * w
    lo = max(1, math.ceil(target / w))
    hi = min(h, max(lo, math.floor(target)))
    eh = int(rng.integers(lo, hi + 1))
    ew = min(w, max(1, round(target / eh)))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return top, left, eh, ew


def _erase(x: Tensor, rng, area: float) -> Tensor:
    _, h, w = x.shape
    top, left, eh, ew = erase_box(h, w, area, rng)
    out = x.clone()
    out[:, top : top + eh, left : left + ew] = 0.0
    return out


def _jpeg(x: Tensor, rng, quality: int) -> Tensor:
    arr = (x.detach().permute(1, 2, 0).cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(back).permute(2, 0, 1).to(x.dtype)


_APPLY = {
    "identity": lambda x, rng: x.clone(),
    "crop": _crop,
    "rotate": _rotate,
    "blur": _blur,
    "brightness": _brightness,
    "noise": _noise,
    "erase": _erase,
    "jpeg": _jpeg,
}


def _apply_one(x: Tensor, kind: str, params: dict, rng) -> Tensor:
    if kind == "composite":
        for sub in BASIC_KINDS:
            if rng.random() < params["prob"]:
                x = _APPLY[sub](x, rng, **DEFAULTS[sub])
        return x
    return _APPLY[kind](x, rng, **params)


@torch.no_grad()
def apply_attack(image: Tensor, spec: AttackSpec) -> Tensor:
    """Apply ``spec`` to one image or a batch (each image consumes the shared RNG stream in order)."""
    rng = np.random.default_rng(spec.seed)
    params = spec.resolved()
    if image.dim() == 3:
        return _apply_one(image, spec.kind, params, rng)
    return torch.stack([_apply_one(img, spec.kind, params, rng) for img in image])


def default_battery(seed: int = 0) -> list:
    return [AttackSpec(kind, seed=seed) for kind in KINDS]
