"""Image I/O, seeded cover/watermark pairing, and a synthetic dataset generator."""

from __future__ import annotations

import logging
import string
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont, UnidentifiedImageError
from torch import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def load_image(path, size=None) -> Tensor:
    """8-bit image file -> ``[3, H, W]`` float tensor in ``[0, 1]``."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(image: Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return (arr * 255.0).round().astype(np.uint8)


def save_image(image: Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def list_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(directory, size: int, paths=None):
    """Decode every image in ``directory``; returns ``(images, paths, n_skipped)``."""
    images, kept, skipped = [], [], 0
    for p in paths if paths is not None else list_images(directory):
        try:
            images.append(load_image(p, size))
            kept.append(p)
        except (UnidentifiedImageError, OSError) as exc:
            skipped += 1
            log.warning("skipping undecodable image %s: %s", p, exc)
    return images, kept, skipped


def ingest_pairs(cover_dir, watermark_dir, n: int, seed: int, size: int = 64) -> list:
    """Pair ``n`` covers with ``n`` watermarks, sampled without replacement under ``seed``.

    Returns a list of ``(cover, watermark)`` tensors. Raises if either directory
    is empty or holds fewer than ``n`` decodable images.
    """
    covers, _, skipped_c = load_image_dir(cover_dir, size)
    marks, _, skipped_w = load_image_dir(watermark_dir, size)
    if skipped_c or skipped_w:
        log.warning("skipped %d cover and %d watermark files", skipped_c, skipped_w)
    if not covers or not marks:
        raise ValueError(f"no decodable images in {cover_dir if not covers else watermark_dir}")
    if n > min(len(covers), len(marks)):
        raise ValueError(f"requested {n} pairs but only {len(covers)} covers / {len(marks)} watermarks")
    rng = np.random.default_rng(seed)
    ci = rng.permutation(len(covers))[:n]
    wi = rng.permutation(len(marks))[:n]
    return [(covers[a], marks[b]) for a, b in zip(ci, wi)]


def stack_pairs(pairs):
    covers = torch.stack([c for c, _ in pairs])
    marks = torch.stack([w for _, w in pairs])
    return covers, marks


# synthetic data ----------------------------------------------------------------


def synthetic_cover(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth multi-colour gradient with sinusoidal texture and a few soft blobs."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-9)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(rng.integers(1, 4)):
        fx, fy = rng.uniform(1, 6, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.08)
        img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None] * rng.uniform(-1, 1, 3)
    for _ in range(rng.integers(1, 5)):
        cx, cy = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.25)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2))
        img += blob[..., None] * rng.uniform(-0.3, 0.3, 3)
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1)


def synthetic_logo(rng: np.random.Generator, size: int) -> np.ndarray:
    """Flat background with a few geometric shapes and one or two glyphs."""
    bg = tuple(int(v) for v in rng.integers(180, 256, 3)) if rng.random() < 0.7 else tuple(
        int(v) for v in rng.integers(0, 256, 3)
    )
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)

    def colour():
        return tuple(int(v) for v in rng.integers(0, 256, 3))

    for _ in range(rng.integers(1, 4)):
        x0, y0 = rng.integers(0, size * 3 // 4, 2)
        w, h = rng.integers(size // 6, size // 2, 2)
        box = [int(x0), int(y0), int(min(size - 1, x0 + w)), int(min(size - 1, y0 + h))]
        shape = rng.integers(0, 3)
        if shape == 0:
            draw.ellipse(box, fill=colour())
        elif shape == 1:
            draw.rectangle(box, fill=colour())
        else:
            draw.polygon([(box[0], box[3]), ((box[0] + box[2]) // 2, box[1]), (box[2], box[3])], fill=colour())
    font = ImageFont.load_default()
    try:
        font = ImageFont.load_default(size=max(10, size // 3))
    except TypeError:
        pass
    text = "".join(rng.choice(list(string.ascii_uppercase), size=int(rng.integers(1, 3))))
    pos = (int(rng.integers(0, size // 3)), int(rng.integers(0, size // 2)))
    draw.text(pos, text, fill=colour(), font=font)
    return np.asarray(img, dtype=np.float64) / 255.0


def make_synthetic_data(out_dir, n_covers: int = 256, n_watermarks: int = 256, size: int = 64, seed: int = 0):
    """Write ``covers/`` and ``watermarks/`` PNG folders under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for sub, n, fn in (("covers", n_covers, synthetic_cover), ("watermarks", n_watermarks, synthetic_logo)):
        (out / sub).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            arr = (fn(rng, size) * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(out / sub / f"{sub[:-1]}_{i:05d}.png")
    return out / "covers", out / "watermarks"
