"""Figure rendering for evaluation and ablation reports (files only, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DIFF_GAIN = 10.0


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def _hwc(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if hasattr(image, "detach") else np.asarray(image)
    return np.clip(np.transpose(arr, (1, 2, 0)), 0.0, 1.0)


def routing_heatmap(weights, mask, path, title: str = "scale selection") -> Path:
    """``[K, K]`` selection weights (rows: watermark scale, columns: cover scale); selected cells outlined."""
    weights, mask = np.asarray(weights), np.asarray(mask)
    k = weights.shape[0]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(weights, cmap="viridis", vmin=0.0)
    for i, j in zip(*np.nonzero(mask)):
        ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, edgecolor="red", linewidth=1.5))
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xlabel("cover scale")
    ax.set_ylabel("watermark scale")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def difference_grid(covers, watermarked, marks, recovered, path, gain: float = DIFF_GAIN) -> Path:
    """One row per sample: cover, watermarked, amplified |difference|, watermark, recovered, amplified |difference|."""
    n = len(covers)
    cols = ["cover", "watermarked", f"|diff| x{gain:g}", "watermark", "recovered", f"|diff| x{gain:g}"]
    fig, axes = plt.subplots(n, len(cols), figsize=(1.6 * len(cols), 1.6 * n), squeeze=False)
    for r in range(n):
        c, w, m, mh = (_hwc(x[r]) for x in (covers, watermarked, marks, recovered))
        tiles = [c, w, np.clip(np.abs(c - w) * gain, 0, 1), m, mh, np.clip(np.abs(m - mh) * gain, 0, 1)]
        for ax, tile in zip(axes[r], tiles):
            ax.imshow(tile)
            ax.axis("off")
    for ax, name in zip(axes[0], cols):
        ax.set_title(name, fontsize=8)
    return _save(fig, path)


def attack_bars(summary: Sequence[dict], path) -> Path:
    """Recovered-watermark PSNR per attack."""
    rows = [r for r in summary if r["pair_kind"] == "watermark_vs_recovered"]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar([r["attack"] for r in rows], [r["psnr"] for r in rows], color="tab:blue")
    ax.set_ylabel("PSNR(W, W_hat) [dB]")
    ax.tick_params(axis="x", rotation=45)
    return _save(fig, path)


def loss_curve(totals: Sequence[float], path, window: int = 50) -> Path:
    totals = np.asarray(totals, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(totals, alpha=0.4, label="total")
    if len(totals) >= window:
        ma = np.convolve(totals, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(totals)), ma, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path) -> Path:
    ok = [r for r in rows if r.get("error") is None]
    labels = [r["label"] for r in ok]
    x = np.arange(len(ok))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(ok)), 3))
    ax.bar(x - 0.2, [r["image_psnr"] for r in ok], 0.4, label="PSNR(I, I_hat)")
    ax.bar(x + 0.2, [r["watermark_psnr"] for r in ok], 0.4, label="PSNR(W, W_hat)")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30)
    ax.set_ylabel("dB")
    ax.legend(fontsize=8)
    return _save(fig, path)
