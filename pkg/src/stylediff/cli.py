"""Command-line entry point: gen-data, train, sample, eval, ablate.

Every command takes an output directory, writes its resolved configuration
there as config.yaml, and touches nothing outside it (datasets and
checkpoints it reads stay read-only). Configuration comes from a YAML file
(--config) with CLI flags overriding individual values; exit codes are 0 on
success, 2 for bad flags (argparse), 3 for configuration errors, 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, config_from_dict, config_to_dict, load_config, save_config
from .encoders import Vocabulary
from .errors import CheckpointError, ConfigError
from .eval import (
    ContrastiveScorer,
    ablation_grid,
    config_hash,
    evaluate_checkpoint,
    write_metrics_csv,
)
from .guidance import ConditionPair, GuidanceWeights
from .losses import FeatureExtractor
from .model import GuidedDenoiser, STYLE
from .rng import make_rng
from .sampler import SamplerConfig, generate
from .synthdata import (
    GeneratorConfig,
    PALETTE,
    PATTERNS,
    denormalize,
    load_dataset,
    mask_background,
    normalize,
    render_image,
    write_dataset,
)
from .training import load_model, train_backbone, train_style_stage


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        doc = config_to_dict(cfg)
        doc["seed"] = args.seed
        cfg = config_from_dict(doc)
    return cfg


def _override(cfg: RunConfig, **section_values) -> RunConfig:
    doc = config_to_dict(cfg)
    for dotted, value in section_values.items():
        if value is None:
            continue
        section, _, leaf = dotted.partition(".")
        doc[section][leaf] = value
    return config_from_dict(doc)


def _generator_config(cfg: RunConfig) -> GeneratorConfig:
    return GeneratorConfig(image_size=cfg.data.image_size, patch_size=cfg.data.patch_size)


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    n_train = args.n if args.n is not None else cfg.data.n_train
    n_test = args.n_test if args.n_test is not None else cfg.data.n_test
    cfg = _override(cfg, **{"data.n_train": n_train, "data.n_test": n_test})
    out = Path(args.out)
    write_dataset(out, _generator_config(cfg), n_train, n_test, seed_offset=args.seed_offset)
    save_config(cfg, out / "config.yaml")
    print(f"wrote {n_train}+{n_test} examples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _, tokens = load_dataset(args.data)
    vocab = Vocabulary(tokens)
    save_config(cfg, out / "config.yaml")
    vocab.save(out / "vocab.txt")
    if args.stage == "backbone":
        ckpt = train_backbone(cfg, train, vocab, out)
        log = out / "train_backbone.csv"
    else:
        if not args.init_from:
            raise ConfigError("train --stage style requires --init-from <backbone checkpoint>")
        ckpt = train_style_stage(cfg, train, vocab, args.init_from, out)
        log = out / "train_style.csv"
    from .plots import plot_loss_curves

    plot_loss_curves(log, log.with_suffix(".png"))
    print(f"checkpoint: {ckpt}")
    return 0


def _load_style_patch(spec: str, patch_size: int, mask_path=None) -> np.ndarray:
    """Either an image path (resized, optionally masked) or 'color-pattern'."""
    path = Path(spec)
    if path.exists():
        img = Image.open(path).convert("RGB")
        side = min(img.size)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side)).resize(
            (patch_size, patch_size), Image.NEAREST
        )
        raw = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
        if mask_path:
            m = Image.open(mask_path).convert("L").resize((patch_size, patch_size), Image.NEAREST)
            mask = (np.asarray(m) > 127).astype(np.float32)
            return mask_background(raw, mask)
        return normalize(raw)
    color, _, pattern = spec.partition("-")
    if color not in PALETTE or pattern not in PATTERNS:
        raise ConfigError(
            f"style {spec!r} is neither an image path nor <color>-<pattern> "
            f"(colors: {', '.join(PALETTE)}; patterns: {', '.join(PATTERNS)})"
        )
    params = {"shade": 0.45, "orientation": "h", "width": 2, "block": 2, "spacing": 3}
    gen = GeneratorConfig(image_size=patch_size, patch_size=patch_size)
    raw, _ = render_image(gen, "tshirt", color, pattern, params)
    full = np.ones((patch_size, patch_size), dtype=np.float32)
    return mask_background(raw, full)


def cmd_sample(args) -> int:
    model, ckpt = load_model(args.ckpt)
    cfg = ckpt.run_config()
    cfg = _override(
        cfg,
        **{
            "guidance.style_scale": args.s_s,
            "guidance.text_scale": args.s_t,
            "guidance.order": args.order,
            "sampler.steps": args.steps,
            "sampler.eta": args.eta,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.ckpt).parent / "vocab.txt"
    if not vocab_path.exists():
        raise ConfigError(f"vocabulary file not found at {vocab_path}; pass --vocab")
    vocab = Vocabulary.load(vocab_path)

    from .encoders import tokenize

    ids = tokenize(args.text, vocab, cfg.encoder.text_len)
    if args.style and ckpt.stage != STYLE:
        raise ConfigError("--style needs a style-stage checkpoint")
    if args.style:
        patch = _load_style_patch(args.style, cfg.data.patch_size, args.style_mask)
        pair = ConditionPair(ids, patch)
    else:
        pair = ConditionPair(
            ids, np.zeros((3, cfg.data.patch_size, cfg.data.patch_size), np.float32)
        ).with_null_style()

    schedule = cfg.schedule.build()
    weights = cfg.guidance.weights()
    model_fn = GuidedDenoiser(model, schedule)
    seed = args.seed if args.seed is not None else cfg.seed
    x0 = generate(
        model_fn,
        pair,
        weights,
        cfg.sampler,
        schedule,
        make_rng(seed, "sample"),
        shape=(3, cfg.data.image_size, cfg.data.image_size),
    )
    raw = denormalize(x0)
    img = Image.fromarray(raw.transpose(1, 2, 0).astype(np.uint8))
    img.save(out / "sample.png")
    if args.dump_raw:
        x0.astype("<f4").tofile(out / "sample.f32")
    save_config(cfg, out / "config.yaml")
    print(f"sample: {out / 'sample.png'} ({model_fn.calls} model calls)")
    return 0


def _eval_prereqs(args):
    model, ckpt = load_model(args.ckpt)
    cfg = ckpt.run_config()
    train, test, tokens = load_dataset(args.data)
    vocab = Vocabulary(tokens)
    scorer = ContrastiveScorer(len(vocab), cfg.data.image_size, seed=cfg.seed)
    scorer.fit(
        train,
        vocab,
        cfg.encoder.text_len,
        iters=cfg.eval.scorer_iters,
        batch=cfg.eval.scorer_batch,
        seed=cfg.seed,
    )
    extractor = FeatureExtractor(seed=cfg.train.extractor_seed)
    return model, ckpt, cfg, test, vocab, scorer, extractor


def cmd_eval(args) -> int:
    model, ckpt, cfg, test, vocab, scorer, extractor = _eval_prereqs(args)
    cfg = _override(
        cfg,
        **{
            "guidance.style_scale": args.s_s,
            "guidance.text_scale": args.s_t,
            "guidance.order": args.order,
            "sampler.steps": args.steps,
            "eval.n_images": args.n,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate_checkpoint(
        model,
        ckpt.stage,
        cfg,
        test,
        vocab,
        scorer,
        extractor,
        cfg.guidance.weights(),
        cfg.sampler,
        cfg.eval.n_images,
        seed=cfg.seed,
    )
    row = {
        "config_hash": config_hash(cfg),
        "s_s": cfg.guidance.style_scale,
        "s_t": cfg.guidance.text_scale,
        "order": cfg.guidance.order,
        "fid_like": report.fid_like,
        "lpips_like": report.lpips_like,
        "cs_like": report.cs_like,
        "attribute_match": report.attribute_match,
        "n": report.n,
    }
    write_metrics_csv(out / "metrics.csv", [row])
    save_config(cfg, out / "config.yaml")
    print(
        f"fid_like={report.fid_like:.4f} lpips_like={report.lpips_like:.6f} "
        f"cs_like={report.cs_like:.2f} attribute_match={report.attribute_match:.3f} n={report.n}"
    )
    return 0


def cmd_ablate(args) -> int:
    model, ckpt, cfg, test, vocab, scorer, extractor = _eval_prereqs(args)
    cfg = _override(
        cfg,
        **{"eval.ablation_images": args.n_images, "eval.ablation_steps": args.steps},
    )
    out = Path(args.out)
    rows = ablation_grid(
        model,
        ckpt.stage,
        cfg,
        test,
        vocab,
        scorer,
        extractor,
        out,
        n_images=cfg.eval.ablation_images,
        steps=cfg.eval.ablation_steps,
        seed=cfg.seed,
    )
    save_config(cfg, out / "config.yaml")
    print(f"ablation grid: {len(rows)} rows -> {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylediff",
        description="Text- and style-conditioned diffusion at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="YAML run configuration (flags override)")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("gen-data", cmd_gen_data, "render a synthetic garment dataset")
    p.add_argument("--n", type=int, help="training examples")
    p.add_argument("--n-test", type=int, help="test examples")
    p.add_argument("--seed", type=int, help="run seed recorded in the config echo")
    p.add_argument("--seed-offset", type=int, default=0, help="offset added to example seeds")

    p = add("train", cmd_train, "train one stage")
    p.add_argument("--stage", choices=["backbone", "style"], required=True)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--init-from", help="backbone checkpoint (required for --stage style)")
    p.add_argument("--seed", type=int, help="override the run seed")

    p = add("sample", cmd_sample, "generate one image from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True, help="prompt, e.g. 'red checks tank'")
    p.add_argument("--style", help="style image path or <color>-<pattern> texture name")
    p.add_argument("--style-mask", help="optional binary mask PNG for the style image")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the checkpoint)")
    p.add_argument("--s-s", type=float, default=None, help="style guidance scale (default 1.2)")
    p.add_argument("--s-t", type=float, default=None, help="text guidance scale (default 1.0)")
    p.add_argument("--order", choices=["style_first", "text_first"], default=None)
    p.add_argument("--steps", type=int, default=None, help="DDIM steps")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-raw", action="store_true", help="also write raw float32 pixels")

    p = add("eval", cmd_eval, "compute metrics for a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=None, help="generated images")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--s-s", type=float, default=None)
    p.add_argument("--s-t", type=float, default=None)
    p.add_argument("--order", choices=["style_first", "text_first"], default=None)

    p = add("ablate", cmd_ablate, "sweep guidance weights/orders and plot curves")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-images", type=int, default=None, help="images per grid cell")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps per image")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
