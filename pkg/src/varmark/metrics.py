"""Image-quality scores and report aggregation.

Inputs are images in ``[0, 1]`` (numpy arrays or torch tensors, channel-first
``[3, H, W]`` or batched ``[B, 3, H, W]``). MAE and RMSE are reported on the
0-255 scale. PSNR is capped at 100 dB for identical inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PAIR_KINDS = ("cover_vs_watermarked", "watermark_vs_recovered")


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(1.0 / math.sqrt(err)))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)) * 255.0)


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b)) * 255.0


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window mean over the last two axes."""
    views = sliding_window_view(x, window.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", views, window)


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gaussian_window()
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a * mu_a
    var_b = _filter(b * b, win) - mu_b * mu_b
    cov = _filter(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels and images."""
    return float(np.mean(ssim_map(a, b)))


@dataclass
class MetricReport:
    pair_kind: str
    psnr: float
    mae: float
    rmse: float
    ssim: float
    perceptual: Optional[float]
    n_samples: int
    attack: str = "identity"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def score_pair(a, b, perceptual=None) -> dict:
    """Scores for a single image pair; ``perceptual`` is an optional callable ``(a, b) -> float``."""
    return {
        "psnr": psnr(a, b),
        "mae": mae(a, b),
        "rmse": rmse(a, b),
        "ssim": ssim(a, b),
        "perceptual": float(perceptual(a, b)) if perceptual is not None else None,
    }


def build_report(pair_kind: str, scores: Sequence[dict], attack: str = "identity") -> MetricReport:
    if pair_kind not in PAIR_KINDS:
        raise ValueError(f"unknown pair kind {pair_kind!r}")
    if not scores:
        raise ValueError("cannot build a report from zero samples")

    def mean(key):
        vals = [s[key] for s in scores]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    return MetricReport(
        pair_kind=pair_kind,
        psnr=mean("psnr"),
        mae=mean("mae"),
        rmse=mean("rmse"),
        ssim=mean("ssim"),
        perceptual=mean("perceptual"),
        n_samples=len(scores),
        attack=attack,
    )


def write_jsonl(rows: Iterable, path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write((row.to_json() if hasattr(row, "to_json") else json.dumps(row)) + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
