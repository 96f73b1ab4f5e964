"""Orchestration: data splits, training runs, evaluation reports and the ablation harness.

Run directory layout::

    <run>/config.yaml
    <run>/train_log.jsonl
    <run>/checkpoints/{init,step_XXXXXX,last}.pt
    <run>/eval/report.jsonl      one row per pair, attack and pair kind
    <run>/eval/summary.jsonl     mean over pairs per attack and pair kind
    <run>/eval/summary.tsv
    <run>/eval/routing.jsonl     per-pair selection weights and top-k masks
    <run>/eval/figures/*.png
"""

from __future__ import annotations

import copy
import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import plotting
from .attacks import AttackSpec, apply_attack, parse_attack
from .config import RunConfig, dump_config
from .csfm import MoEConfig, MoHConfig
from .data import ingest_pairs, stack_pairs
from .errors import ConfigError
from .metrics import PAIR_KINDS, build_report, score_pair, write_jsonl
from .training import default_perceptual, load_checkpoint, train

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("attack", "pair_kind", "psnr", "ssim", "mae", "rmse", "perceptual", "n_samples")


def split_pairs(cfg: RunConfig, size: Optional[int] = None):
    """Seeded ``(train, held_out)`` pair lists; held-out pairs never appear in training."""
    d = cfg.data
    if not d.cover_dir or not d.watermark_dir:
        raise ConfigError("data.cover_dir and data.watermark_dir must be set")
    for p in (d.cover_dir, d.watermark_dir):
        if not Path(p).is_dir():
            raise FileNotFoundError(f"data directory not found: {p}")
    size = size or cfg.model.image_size
    pairs = ingest_pairs(d.cover_dir, d.watermark_dir, d.n_train + d.n_eval, cfg.seed, size)
    return pairs[: d.n_train], pairs[d.n_train :]


def run_training(cfg: RunConfig, out_dir, train_pairs, tokenizer_state=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = train(cfg, train_pairs, out, tokenizer_state=tokenizer_state)
    if cfg.eval.figures and result["history"]:
        plotting.loss_curve([r.total for r in result["history"]], out / "loss.png")
    return result


@torch.no_grad()
def embed_batches(model, covers, marks, batch_size: int):
    """Watermarked images plus per-pair selection weights and masks (model in eval mode)."""
    model.eval()
    images, weights, masks, traces = [], [], [], []
    for start in range(0, len(covers), batch_size):
        res = model.embed(covers[start : start + batch_size], marks[start : start + batch_size])
        images.append(res.watermarked)
        weights.append(res.plan.weights)
        masks.append(res.plan.mask())
        traces.append([t.summary() for t in res.traces])
    return torch.cat(images), torch.cat(weights), torch.cat(masks), traces


@torch.no_grad()
def extract_batches(model, images, batch_size: int):
    model.eval()
    return torch.cat([model.extract(images[s : s + batch_size]) for s in range(0, len(images), batch_size)])


def attack_seed(base_seed: int, kind: str) -> int:
    """Per-attack seed that depends on the attack, not on its position in the list."""
    return (base_seed * 1_000_003 + zlib.crc32(kind.encode())) % (2**31)


def _specs(cfg: RunConfig) -> list:
    specs = [AttackSpec("identity", seed=cfg.seed)]
    for text in cfg.eval.attacks:
        spec = parse_attack(text)
        specs.append(AttackSpec(spec.kind, spec.params, attack_seed(cfg.seed, spec.label)))
    return specs


def evaluate_model(model, cfg: RunConfig, pairs, out_dir, perceptual=None) -> dict:
    """Embed, attack (identity first), extract and score every held-out pair.

    The cover pair kind compares the cover with the (attacked) watermarked image.
    Returns the summary rows; files go to ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scorer = perceptual or default_perceptual()

    def perc(a, b):
        with torch.no_grad():
            return float(scorer(a[None], b[None]))

    covers, marks = stack_pairs(pairs)
    bs = cfg.eval.batch_size
    watermarked, weights, masks, traces = embed_batches(model, covers, marks, bs)

    rows, summary = [], []
    recovered_clean = None
    for spec in _specs(cfg):
        attacked = apply_attack(watermarked, spec) if spec.kind != "identity" else watermarked
        recovered = extract_batches(model, attacked, bs)
        if spec.kind == "identity":
            recovered_clean = recovered
        per_kind = {k: [] for k in PAIR_KINDS}
        for i in range(len(pairs)):
            per_kind["cover_vs_watermarked"].append(score_pair(covers[i], attacked[i], perc))
            per_kind["watermark_vs_recovered"].append(score_pair(marks[i], recovered[i], perc))
        for kind in PAIR_KINDS:
            for i, s in enumerate(per_kind[kind]):
                rows.append({"pair_index": i, "pair_kind": kind, "attack": spec.label, **s, "n_samples": 1})
            summary.append(build_report(kind, per_kind[kind], spec.label).__dict__)

    write_jsonl(rows, out / "report.jsonl")
    write_jsonl(summary, out / "summary.jsonl")
    write_summary_table(summary, out / "summary.tsv")
    routing = [
        {"pair_index": i, "weights": weights[i].tolist(), "selected": masks[i].to(torch.int64).tolist()}
        for i in range(len(pairs))
    ]
    write_jsonl(routing, out / "routing.jsonl")
    if traces:
        (out / "routing_traces.json").write_text(json.dumps(traces[0]))

    if cfg.eval.figures:
        fig = out / "figures"
        plotting.routing_heatmap(weights.mean(0).numpy(), masks[0].numpy(), fig / "routing_mean.png",
                                 "mean selection weights (pair 0 selection outlined)")
        plotting.routing_heatmap(weights[0].numpy(), masks[0].numpy(), fig / "routing_pair0.png", "pair 0")
        n = min(4, len(pairs))
        plotting.difference_grid(covers[:n], watermarked[:n], marks[:n], recovered_clean[:n], fig / "differences.png")
        plotting.attack_bars(summary, fig / "attacks.png")
    return {"summary": summary, "rows": len(rows), "dir": out}


def write_summary_table(summary: Sequence[dict], path) -> None:
    def fmt(v):
        return "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    lines = ["\t".join(SUMMARY_COLUMNS)]
    lines += ["\t".join(fmt(r[c]) for c in SUMMARY_COLUMNS) for r in summary]
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate(cfg: RunConfig, checkpoint, out_dir=None, pairs=None) -> dict:
    """Evaluate a checkpoint on the held-out split of ``cfg`` (the checkpoint file is only read)."""
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model, _, _ = load_checkpoint(checkpoint)
    if pairs is None:
        _, pairs = split_pairs(cfg, model.cfg.image_size)
    if not pairs:
        raise ValueError("no held-out pairs to evaluate (data.n_eval is 0)")
    out = Path(out_dir) if out_dir is not None else checkpoint.parent.parent / "eval"
    return evaluate_model(model, cfg, pairs[: cfg.eval.n_pairs], out)


# ablation ----------------------------------------------------------------------

AXES = ("select_k", "fixed_vs_adaptive_scales", "head_split", "expert_count")


def scale_baselines(num_scales: int, k: int) -> list:
    """Fixed cover-scale sets for the selection ablation: evenly spaced, smallest ``k``, largest ``k``, then adaptive."""
    even = sorted({int(round(v)) for v in np.linspace(0, num_scales - 1, k)})
    return [even, list(range(k)), list(range(num_scales - k, num_scales)), "adaptive"]


@dataclass
class AblationGrid:
    """One ablation axis and its values.

    ``select_k``: ints. ``fixed_vs_adaptive_scales``: lists of 0-based cover
    scales or ``"adaptive"``. ``head_split``: ``[shared, active_routed]`` pairs
    (total heads unchanged). ``expert_count``: ``num_experts`` ints or
    ``[num_experts, active_experts]`` pairs.
    """

    axis: str
    values: list

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ConfigError("ablation grid needs at least one value")

    def label(self, value) -> str:
        if self.axis == "fixed_vs_adaptive_scales":
            return "top-k" if value == "adaptive" else "fixed " + ",".join(str(v) for v in value)
        if isinstance(value, (list, tuple)):
            return "/".join(str(v) for v in value)
        return str(value)

    def configure(self, base: RunConfig, value) -> RunConfig:
        """Copy of ``base`` with this axis set to ``value`` (validated by the config types)."""
        cfg = copy.deepcopy(base)
        m = cfg.model
        if self.axis == "select_k":
            m.select_k, m.fixed_scales = int(value), None
        elif self.axis == "fixed_vs_adaptive_scales":
            if value == "adaptive":
                m.fixed_scales = None
            else:
                m.fixed_scales = [int(v) for v in value]
                m.select_k = len(m.fixed_scales)
        elif self.axis == "head_split":
            shared, routed = (int(v) for v in value)
            m.moh = MoHConfig(m.moh.total_heads, shared, routed, m.moh.head_dim)
        else:
            n, active = (value, m.moe.active_experts) if not isinstance(value, (list, tuple)) else value
            m.moe = MoEConfig(int(n), int(active), m.moe.expansion)
        m.__post_init__()
        return cfg


def ablation_row(label: str, summary: Sequence[dict]) -> dict:
    def pick(kind, key):
        return next(r[key] for r in summary if r["pair_kind"] == kind and r["attack"] == "identity")

    return {
        "label": label,
        "image_psnr": pick("cover_vs_watermarked", "psnr"),
        "image_ssim": pick("cover_vs_watermarked", "ssim"),
        "watermark_psnr": pick("watermark_vs_recovered", "psnr"),
        "watermark_ssim": pick("watermark_vs_recovered", "ssim"),
        "error": None,
    }


def ablate(
    grid: AblationGrid, base: RunConfig, out_dir, pairs=None, share_tokenizer: bool = True, tokenizer_state=None
) -> list:
    """Train and evaluate every grid value under the seed and step budget of ``base``.

    With ``share_tokenizer`` the tokenizer is pretrained once and reused by
    every cell (identical weights to what each cell would fit on its own when
    the tokenizer settings are not under ablation); a precomputed
    ``tokenizer_state`` skips that fit. A failing cell is recorded and the
    remaining cells still run.
    """
    from .training import fit_tokenizer

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs, held = pairs if pairs is not None else split_pairs(base)
    configs = [(grid.label(v), grid.configure(base, v)) for v in grid.values]
    tok_state = tokenizer_state
    if tok_state is None and share_tokenizer:
        tok_state = fit_tokenizer(base, train_pairs)
    rows = []
    for i, (label, cfg) in enumerate(configs):
        cell = out / f"cell_{i:02d}"
        try:
            start = time.perf_counter()
            run = run_training(cfg, cell, train_pairs, tokenizer_state=tok_state)
            seconds = time.perf_counter() - start
            res = evaluate_model(run["model"], cfg, held[: cfg.eval.n_pairs], cell / "eval")
            rows.append({**ablation_row(label, res["summary"]), "train_seconds": round(seconds, 1)})
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.error("ablation cell %s failed: %s", label, exc)
            rows.append({"label": label, "error": f"{type(exc).__name__}: {exc}"})
    write_jsonl(rows, out / "ablation.jsonl")
    write_ablation_table(grid, rows, out / "ablation.md")
    if base.eval.figures and any(r.get("error") is None for r in rows):
        plotting.ablation_bars(rows, out / "ablation.png")
    return rows


def write_ablation_table(grid: AblationGrid, rows: Sequence[dict], path) -> None:
    """Markdown table: one row per setting, image-quality and watermark-fidelity column pairs."""
    lines = [
        f"| {grid.axis} | PSNR(I, I_hat) | SSIM(I, I_hat) | PSNR(W, W_hat) | SSIM(W, W_hat) |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        if r.get("error"):
            lines.append(f"| {r['label']} | failed: {r['error']} | | | |")
        else:
            lines.append(
                f"| {r['label']} | {r['image_psnr']:.3f} | {r['image_ssim']:.4f} "
                f"| {r['watermark_psnr']:.3f} | {r['watermark_ssim']:.4f} |"
            )
    Path(path).write_text("\n".join(lines) + "\n")
