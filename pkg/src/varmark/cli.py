"""Command-line entry point: ``varmark <command> [options]``.

Every command exits 0 on success and 1 on any error (2 for usage errors).
Outputs default to ``$VARMARK_OUTPUT_ROOT/<command>`` (``runs/`` when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("varmark")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.steps=500 (repeatable)")
    p.add_argument("--cover-dir", help="directory of cover images (sets data.cover_dir)")
    p.add_argument("--watermark-dir", help="directory of watermark images (sets data.watermark_dir)")
    p.add_argument("--out", help="output directory")


def _config(args):
    from .config import load_config

    overrides = list(args.overrides)
    if args.cover_dir:
        overrides.append(f"data.cover_dir={args.cover_dir}")
    if args.watermark_dir:
        overrides.append(f"data.watermark_dir={args.watermark_dir}")
    return load_config(args.config, overrides)


def _out_dir(args, cfg, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    from .config import RunConfig

    return RunConfig().resolve_output_dir() / name


def cmd_make_synthetic_data(args) -> int:
    from .data import make_synthetic_data

    out = Path(args.out) if args.out else _out_dir(args, None, "synthetic")
    covers, marks = make_synthetic_data(out, args.n_covers, args.n_watermarks, args.size, args.seed)
    print(json.dumps({"covers": str(covers), "watermarks": str(marks)}))
    return 0


def cmd_train(args) -> int:
    from .pipeline import run_training, split_pairs

    cfg = _config(args)
    out = _out_dir(args, cfg, "train")
    train_pairs, _ = split_pairs(cfg)
    result = run_training(cfg, out, train_pairs)
    last = result["history"][-1].to_dict() if result["history"] else {}
    print(json.dumps({"run_dir": str(out), "checkpoint": str(result["last"]), "last_step": last}))
    return 0


def _load_model(path):
    from .training import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, cfg, _ = load_checkpoint(path)
    model.eval()
    return model, cfg


def cmd_embed(args) -> int:
    import torch

    from .data import load_image, save_image
    from .plotting import difference_grid

    model, cfg = _load_model(args.checkpoint)
    size = cfg.model.image_size
    cover = load_image(args.cover, size)[None]
    mark = load_image(args.watermark, size)[None]
    with torch.no_grad():
        res = model.embed(cover, mark)
        recovered = model.extract(res.watermarked)
    out = Path(args.out) if args.out else _out_dir(args, None, "embed") / "watermarked.png"
    save_image(res.watermarked[0], out)
    if args.figure:
        difference_grid(cover, res.watermarked, mark, recovered, out.with_name(out.stem + "_diff.png"))
    print(json.dumps({"watermarked": str(out), "selection": res.plan.topk[0].tolist()}))
    return 0


def cmd_extract(args) -> int:
    import torch

    from .data import load_image, save_image

    model, cfg = _load_model(args.checkpoint)
    image = load_image(args.image, cfg.model.image_size)[None]
    with torch.no_grad():
        mark = model.extract(image)
    out = Path(args.out) if args.out else _out_dir(args, None, "extract") / "recovered.png"
    save_image(mark[0], out)
    print(json.dumps({"recovered": str(out)}))
    return 0


def cmd_attack(args) -> int:
    from .attacks import apply_attack, parse_attack
    from .data import load_image, save_image

    spec = parse_attack(args.attack, args.seed)
    image = load_image(args.image)
    out = Path(args.out) if args.out else _out_dir(args, None, "attack") / f"{spec.kind}.png"
    save_image(apply_attack(image, spec), out)
    print(json.dumps({"attacked": str(out), "attack": spec.to_dict()}))
    return 0


def cmd_evaluate(args) -> int:
    from .config import apply_overrides, from_dict
    from .pipeline import evaluate
    from .training import load_checkpoint

    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if args.config:
        cfg = _config(args)
    else:
        # default to the config stored with the checkpoint
        _, stored, _ = load_checkpoint(args.checkpoint)
        overrides = list(args.overrides)
        if args.cover_dir:
            overrides.append(f"data.cover_dir={args.cover_dir}")
        if args.watermark_dir:
            overrides.append(f"data.watermark_dir={args.watermark_dir}")
        cfg = from_dict(apply_overrides(stored.to_dict(), overrides))
    out = Path(args.out) if args.out else None
    res = evaluate(cfg, args.checkpoint, out)
    print(json.dumps({"report_dir": str(res["dir"]), "rows": res["rows"]}))
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import AblationGrid, ablate, scale_baselines

    cfg = _config(args)
    if args.values:
        values = json.loads(args.values)
    elif args.axis == "fixed_vs_adaptive_scales":
        values = scale_baselines(len(cfg.model.scales), cfg.model.select_k)
    else:
        raise ValueError(f"--values is required for axis {args.axis}")
    grid = AblationGrid(args.axis, values)
    out = _out_dir(args, cfg, "ablate")
    rows = ablate(grid, cfg, out)
    print(json.dumps({"table": str(out / "ablation.md"), "rows": rows}))
    return 1 if all(r.get("error") for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varmark", description="Multi-scale residual watermark embedding and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic-data", help="write synthetic cover and watermark PNG folders")
    p.add_argument("--out")
    p.add_argument("--n-covers", type=int, default=256)
    p.add_argument("--n-watermarks", type=int, default=256)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic_data)

    p = sub.add_parser("train", help="pretrain the tokenizer and train the embedder and extractor")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="watermark one cover image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cover", required=True)
    p.add_argument("--watermark", required=True)
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--figure", action="store_true", help="also write an amplified difference figure")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover the watermark from an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="output PNG path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply one perturbation to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--attack", required=True, help="kind[:param=value,...], e.g. noise:sigma=0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output PNG path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out pairs under the attack battery")
    p.add_argument("--checkpoint", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare one config axis")
    p.add_argument("--axis", required=True,
                   choices=["select_k", "fixed_vs_adaptive_scales", "head_split", "expert_count"])
    p.add_argument("--values", help='JSON list, e.g. "[2, 4]" or "[[0,1,2,3], \\"adaptive\\"]"')
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        if args.verbose:
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
