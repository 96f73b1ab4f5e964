"""Losses, discriminator, and the optimisation loop.

Objective::

    total = w_rec * (w_im * mse(I, I_hat) + w_wm * mse(W, W_hat))
          + w_perc * perceptual(I, I_hat)
          + w_adv * adversarial(I_hat)
          + w_moe * N * sum(load * P)

The adversarial term only enters once the discriminator has started.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .attacks import KINDS, AttackSpec, apply_attack
from .config import LossWeights, RunConfig, TrainSchedule
from .csfm import collect_balance_stats
from .errors import NonFiniteLossError, ShapeError
from .metrics import psnr

log = logging.getLogger(__name__)

LOGIT_CLAMP = 20.0


# losses ------------------------------------------------------------------------


def rec_loss(image, image_hat, mark, mark_hat, weights: LossWeights = LossWeights()) -> Tensor:
    if image.shape != image_hat.shape or mark.shape != mark_hat.shape:
        raise ShapeError("reconstruction pairs must have matching shapes")
    return weights.im * torch.mean((image - image_hat) ** 2) + weights.wm * torch.mean((mark - mark_hat) ** 2)


def moe_balance_loss(load: Tensor, probs: Tensor, atol: float = 1e-5) -> Tensor:
    """``N * sum(load_i * P_i)``; 1 at uniform routing, N when collapsed onto one expert."""
    if load.shape != probs.shape:
        raise ShapeError("load and probability vectors differ in length")
    for name, v in (("load", load), ("P", probs)):
        if abs(float(v.detach().sum()) - 1.0) > atol or bool((v < 0).any()):
            raise ValueError(f"{name} must be a probability vector, sums to {float(v.sum())}")
    return load.shape[-1] * torch.sum(load * probs)


class FeatureDistance(nn.Module):
    """Stand-in perceptual distance: MSE between activations of a fixed random conv net.

    The weights come from ``seed`` and are never trained. Any callable
    ``(a, b) -> scalar tensor`` (e.g. a real LPIPS model) can be used instead.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, c in enumerate(widths):
            conv = nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(c, generator=gen) * 0.1)
            layers.append(conv)
            cin = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x: Tensor) -> list:
        h = x * 2.0 - 1.0
        out = []
        for conv in self.layers:
            h = F.gelu(conv(h))
            out.append(h)
        return out

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        fa, fb = self.features(a), self.features(b)
        return sum(torch.mean((x - y) ** 2) for x, y in zip(fa, fb)) / len(fa)


_DEFAULT_PERCEPTUAL: Optional[FeatureDistance] = None


def default_perceptual() -> FeatureDistance:
    global _DEFAULT_PERCEPTUAL
    if _DEFAULT_PERCEPTUAL is None:
        _DEFAULT_PERCEPTUAL = FeatureDistance()
    return _DEFAULT_PERCEPTUAL


def perceptual_loss(a: Tensor, b: Tensor, scorer: Optional[Callable] = None) -> Tensor:
    scorer = scorer if scorer is not None else default_perceptual()
    if scorer is _DEFAULT_PERCEPTUAL or isinstance(scorer, nn.Module):
        scorer = scorer.to(dtype=a.dtype)
    return scorer(a, b)


class PatchDiscriminator(nn.Module):
    """Three stride-2 conv layers and a 1x1 head: ``[B, 3, H, W] -> [B, 1, H/8, W/8]`` logits."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(8, 2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.GroupNorm(8, 4 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x * 2.0 - 1.0)


def adversarial_losses(fake: Tensor, real: Tensor, discriminator: Callable):
    """Non-saturating logistic losses ``(generator, discriminator)``, logits clamped to +-20.

    The discriminator loss averages its real and fake terms and sees ``fake`` detached.
    """
    fake_logits = discriminator(fake).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    gen = F.softplus(-fake_logits).mean()
    real_logits = discriminator(real).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    fake_logits_d = discriminator(fake.detach()).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    disc = 0.5 * (F.softplus(-real_logits).mean() + F.softplus(fake_logits_d).mean())
    return gen, disc


@dataclass
class LossReport:
    rec: float
    perc: float
    adv: float
    moe: float
    total: float
    psnr_image: Optional[float] = None
    psnr_watermark: Optional[float] = None
    step: Optional[int] = None
    disc: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of ``rec``, ``perc``, ``adv`` and ``moe``; returns ``(total_tensor, LossReport)``."""
    scale = {"rec": weights.rec, "perc": weights.perc, "adv": weights.adv, "moe": weights.moe}
    total = 0.0
    values = {}
    for key, w in scale.items():
        term = components.get(key, 0.0)
        value = float(term.detach()) if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss component {key} is {value}")
        values[key] = value
        total = total + w * term
    report = LossReport(total=float(total.detach()) if isinstance(total, Tensor) else float(total), **values)
    return total, report


# training loop -----------------------------------------------------------------


def set_stage(model, stage: str) -> None:
    """Freeze parameters for a stage: ``base`` freezes the image encoder and codebook,
    ``finetune`` the watermark encoder and codebook."""
    model.requires_grad_(True)
    model.vq.codebook.requires_grad_(False)
    if stage == "base":
        model.vq.encoder.requires_grad_(False)
    elif stage == "finetune":
        model.watermark_encoder.requires_grad_(False)
    else:
        raise ValueError(f"unknown stage {stage!r}")


class Trainer:
    """Single-writer optimisation loop over a :class:`~varmark.model.WatermarkModel`."""

    def __init__(self, model, cfg: RunConfig, discriminator: Optional[nn.Module] = None, perceptual=None):
        self.model = model
        self.cfg = cfg
        self.schedule: TrainSchedule = cfg.train
        self.weights: LossWeights = cfg.loss
        self.discriminator = discriminator if discriminator is not None else PatchDiscriminator()
        self.perceptual = perceptual if perceptual is not None else default_perceptual()
        set_stage(model, self.schedule.stage)
        extractor_ids = {id(p) for p in model.extractor.parameters()}
        params = [p for p in model.parameters() if p.requires_grad and id(p) not in extractor_ids]
        lr = self.schedule.learning_rate
        ex_lr = lr if self.schedule.extractor_lr is None else self.schedule.extractor_lr
        self.opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
        self.extractor_opt = torch.optim.Adam(model.extractor.parameters(), lr=ex_lr, betas=(0.9, 0.999))
        self.disc_opt = torch.optim.Adam(self.discriminator.parameters(), lr=lr, betas=(0.9, 0.999))
        self.step = 0
        self.attack_rng = np.random.default_rng(cfg.seed + 7919)
        self.last_checkpoint = None

    def _augment(self, image: Tensor) -> Tensor:
        if not self.schedule.attack_augmentation or self.attack_rng.random() >= self.schedule.augmentation_prob:
            return image
        kind = KINDS[int(self.attack_rng.integers(len(KINDS)))]
        attacked = apply_attack(image.detach(), AttackSpec(kind, seed=int(self.attack_rng.integers(2**31))))
        # gradient passes straight through the (non-differentiable) attack
        return image + (attacked - image).detach()

    def losses(self, covers: Tensor, marks: Tensor):
        """Generator-side objective; returns ``(total, report, watermarked)``."""
        with torch.set_grad_enabled(torch.is_grad_enabled() and not self.warming_up):
            res = self.model.embed(covers, marks)
        image_hat = res.watermarked
        mark_hat = self.model.extract(self._augment(image_hat))
        load, probs = collect_balance_stats([t for t in res.traces if t.expert_gates is not None])
        components = {
            "rec": rec_loss(covers, image_hat, marks, mark_hat, self.weights),
            "perc": perceptual_loss(covers, image_hat, self.perceptual),
            "moe": moe_balance_loss(load, probs),
            "adv": 0.0,
        }
        if self.discriminator_active:
            components["adv"], _ = adversarial_losses(image_hat, covers, self.discriminator)
        total, report = total_loss(components, self.weights)
        report.psnr_image = psnr(covers, image_hat)
        report.psnr_watermark = psnr(marks, mark_hat)
        return total, report, image_hat

    @property
    def warming_up(self) -> bool:
        return self.step < self.schedule.extractor_warmup_steps

    @property
    def discriminator_active(self) -> bool:
        return self.step >= self.schedule.discriminator_start_step

    def train_step(self, covers: Tensor, marks: Tensor) -> LossReport:
        self.model.train()
        self.discriminator.requires_grad_(False)
        try:
            total, report, image_hat = self.losses(covers, marks)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"step {self.step}: {exc}", self.last_checkpoint) from exc
        finally:
            self.discriminator.requires_grad_(True)
        self.opt.zero_grad(set_to_none=True)
        self.extractor_opt.zero_grad(set_to_none=True)
        total.backward()
        if not self.warming_up:
            self.opt.step()
        self.extractor_opt.step()
        if self.discriminator_active:
            _, disc_loss = adversarial_losses(image_hat.detach(), covers, self.discriminator)
            self.disc_opt.zero_grad(set_to_none=True)
            disc_loss.backward()
            self.disc_opt.step()
            report.disc = float(disc_loss.detach())
        report.step = self.step
        self.step += 1
        return report


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless index batches drawn epoch by epoch from seeded permutations."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[start : start + batch_size]


def pretrain_tokenizer(
    vq, images: Tensor, steps: int, batch_size: int, lr: float, seed: int, restart_every: int = 50
) -> list:
    """Fit encoder, codebook and decoder on ``images`` (reconstruction + VQ losses).

    The codebook is seeded from encoder residuals before the first step, and
    codes left unused for ``restart_every`` steps are re-seeded from the current
    batch (during the first 80% of steps).
    """
    vq.train()
    opt = torch.optim.Adam(vq.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    history = []
    if steps > 0:
        with torch.no_grad():
            probe = images[torch.as_tensor(rng.permutation(len(images))[:64])]
            vq.seed_codebook(vq.encode_image(probe), gen)
    usage = torch.zeros(vq.codebook.num_embeddings, dtype=torch.long)
    for step, idx in zip(range(steps), batches(len(images), batch_size, rng)):
        x = images[torch.as_tensor(idx)]
        recon, vq_loss, pyramid = vq(x)
        loss = F.mse_loss(recon, x) + vq_loss
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(vq.parameters(), 1.0)
        opt.step()
        for m in pyramid.maps:
            usage += torch.bincount(m.indices.flatten(), minlength=usage.numel())
        if restart_every and (step + 1) % restart_every == 0 and step < 0.8 * steps:
            n = vq.restart_codes(usage == 0, vq.encode_image(x).detach(), gen)
            if n:
                log.debug("tokenizer step %d: restarted %d codes", step, n)
            usage.zero_()
        history.append(float(loss.detach()))
        if step % 100 == 0:
            log.info("tokenizer step %d loss %.5f", step, history[-1])
    return history


def save_checkpoint(path, model, cfg: RunConfig, step: int, discriminator=None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": cfg.to_dict(),
        "schedule": [list(s) for s in model.schedule.sizes],
        "model": model.state_dict(),
        "step": step,
        **extra,
    }
    if discriminator is not None:
        payload["discriminator"] = discriminator.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, cfg, payload)``."""
    from .config import from_dict
    from .model import WatermarkModel

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_dict(payload["config"])
    model = WatermarkModel(cfg.model)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


def fit_tokenizer(cfg: RunConfig, train_pairs) -> dict:
    """Tokenizer weights exactly as :func:`train` would pretrain them for ``cfg``."""
    from .data import stack_pairs
    from .model import WatermarkModel

    torch.manual_seed(cfg.seed)
    model = WatermarkModel(cfg.model)
    covers, marks = stack_pairs(train_pairs)
    _pretrain(model, covers, marks, cfg)
    return model.vq.state_dict()


def _pretrain(model, covers: Tensor, marks: Tensor, cfg: RunConfig) -> list:
    sched = cfg.train
    batch = sched.tokenizer_batch_size or sched.batch_size
    images = torch.cat([covers, marks])
    return pretrain_tokenizer(model.vq, images, sched.tokenizer_steps, batch, sched.tokenizer_lr, cfg.seed)


def train(cfg: RunConfig, train_pairs, out_dir, init_model=None, tokenizer_state=None) -> dict:
    """Full run: step-0 snapshot, tokenizer pretraining, then ``cfg.train.steps`` steps of the stage.

    ``tokenizer_state`` (from :func:`fit_tokenizer`) replaces the pretraining
    step, so several runs can share one tokenizer.

    Writes ``checkpoints/init.pt``, step-tagged snapshots and ``checkpoints/last.pt``,
    and one JSON line per step to ``train_log.jsonl``. Returns paths and the loss history.
    """
    from .data import stack_pairs
    from .model import WatermarkModel

    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = init_model if init_model is not None else WatermarkModel(cfg.model)
    disc = PatchDiscriminator()
    init_path = save_checkpoint(ckpt_dir / "init.pt", model, cfg, 0)

    covers, marks = stack_pairs(train_pairs)
    sched = cfg.train
    tok_history = []
    if tokenizer_state is not None:
        model.vq.load_state_dict(tokenizer_state)
        model.sync_watermark_encoder()
    elif sched.stage == "base" and sched.tokenizer_steps > 0:
        tok_history = _pretrain(model, covers, marks, cfg)
        model.sync_watermark_encoder()

    trainer = Trainer(model, cfg, discriminator=disc)
    trainer.last_checkpoint = init_path
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        for step, idx in zip(range(sched.steps), batches(len(covers), sched.batch_size, rng)):
            sel = torch.as_tensor(idx)
            report = trainer.train_step(covers[sel], marks[sel])
            history.append(report)
            fh.write(json.dumps({"stage": sched.stage, **report.to_dict()}) + "\n")
            if sched.log_every and step % sched.log_every == 0:
                log.info(
                    "step %d total %.5f rec %.5f psnr_im %.2f psnr_wm %.2f",
                    step, report.total, report.rec, report.psnr_image, report.psnr_watermark,
                )
            if sched.checkpoint_every and (step + 1) % sched.checkpoint_every == 0:
                trainer.last_checkpoint = save_checkpoint(
                    ckpt_dir / f"step_{step + 1:06d}.pt", model, cfg, step + 1, disc
                )
    last = save_checkpoint(ckpt_dir / "last.pt", model, cfg, sched.steps, disc)
    return {
        "init": init_path,
        "last": last,
        "log": log_path,
        "history": history,
        "tokenizer_history": tok_history,
        "model": model,
    }
