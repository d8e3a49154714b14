"""Evaluation: distribution/pairwise/semantic metrics and the ablation grid.

All metrics share the frozen feature pyramid from the loss module, so their
absolute values are only meaningful relative to each other within a run. The
semantic score comes from a small dual encoder trained contrastively on
synthetic pairs right here; attribute matching instead uses the renderer's
by-construction color/pattern detectors and needs no training at all.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import tensor as T
from .config import RunConfig, config_to_dict
from .encoders import Vocabulary, tokenize_words
from .errors import ConfigError, ShapeError
from .guidance import ConditionPair, GuidanceWeights
from .losses import FeatureExtractor, l_perceptual
from .model import GuidedDenoiser
from .nn import glorot
from .rng import make_rng
from .sampler import SamplerConfig, generate
from .synthdata import (
    PALETTE,
    PATTERNS,
    classify_color,
    classify_pattern,
    denormalize,
    foreground_mask,
    mask_background,
    normalize,
    patch_mask,
    style_crop,
)
from .tensor import Tensor

ABLATION_WEIGHTS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5, 3.0)

METRICS_COLUMNS = [
    "config_hash",
    "s_s",
    "s_t",
    "order",
    "fid_like",
    "lpips_like",
    "cs_like",
    "attribute_match",
    "n",
]


@dataclass(frozen=True)
class MetricReport:
    fid_like: float
    lpips_like: float
    cs_like: float
    attribute_match: float
    n: int

    def __post_init__(self):
        if self.fid_like < 0 or self.lpips_like < 0:
            raise ValueError("distance metrics must be nonnegative")
        if not -100.0 <= self.cs_like <= 100.0:
            raise ValueError("semantic score must lie in [-100, 100]")
        if not 0.0 <= self.attribute_match <= 1.0:
            raise ValueError("attribute match is a fraction")


def config_hash(cfg: RunConfig) -> str:
    doc = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


# distribution distance -------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_like(gen_features: np.ndarray, ref_features: np.ndarray) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) on feature sets."""
    a = np.asarray(gen_features, dtype=np.float64)
    b = np.asarray(ref_features, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sets must be [n, d] with matching d: {a.shape} vs {b.shape}")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    eps = 1e-6
    for name, s in (("generated", s1), ("reference", s2)):
        if np.linalg.eigvalsh(s).min() < 1e-10:
            warnings.warn(
                f"{name} covariance is degenerate; regularizing with {eps} * I",
                RuntimeWarning,
                stacklevel=2,
            )
            s += eps * np.eye(s.shape[0])
    root_s1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(root_s1 @ s2 @ root_s1)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def lpips_like(gen, ref_paired, extractor: FeatureExtractor) -> float:
    """Mean perceptual distance over aligned pairs."""
    gen = np.asarray(gen)
    ref = np.asarray(ref_paired)
    if len(gen) != len(ref):
        raise ShapeError(f"paired sets differ in length: {len(gen)} vs {len(ref)}")
    with T.no_grad():
        dists = [l_perceptual(g, r, extractor).item() for g, r in zip(gen, ref)]
    return float(np.mean(dists))


# semantic dual encoder ---------------------------------------------------------

class ContrastiveScorer:
    """Tiny image/text dual encoder trained with a symmetric InfoNCE loss."""

    def __init__(self, vocab_size: int, image_size: int, embed_dim: int = 32, seed: int = 0):
        rng = make_rng(seed, "scorer")
        self.image_size = image_size
        self.embed_dim = embed_dim
        fan = 3 * 9
        self.conv1 = Tensor(
            (rng.standard_normal((16, 3, 3, 3)) * np.sqrt(2.0 / fan)).astype(np.float32),
            requires_grad=True,
        )
        self.conv2 = Tensor(
            (rng.standard_normal((32, 16, 3, 3)) * np.sqrt(2.0 / 144)).astype(np.float32),
            requires_grad=True,
        )
        self.img_proj = glorot(rng, (32, embed_dim))
        self.tok_embed = Tensor(
            (rng.standard_normal((vocab_size, embed_dim)) * 0.05).astype(np.float32),
            requires_grad=True,
        )
        self.txt_proj = glorot(rng, (embed_dim, embed_dim))
        self.temperature = 0.1
        self.trained = False

    def params(self) -> dict:
        return {
            "conv1": self.conv1,
            "conv2": self.conv2,
            "img_proj": self.img_proj,
            "tok_embed": self.tok_embed,
            "txt_proj": self.txt_proj,
        }

    def embed_images(self, images_norm) -> Tensor:
        x = images_norm if isinstance(images_norm, Tensor) else Tensor(np.asarray(images_norm))
        h = T.tanh(T.conv2d(x, self.conv1, stride=1, padding=1))
        h = T.avg_pool2d(h, 2)
        h = T.tanh(T.conv2d(h, self.conv2, stride=1, padding=1))
        h = T.mean(h, axis=(2, 3))
        z = T.matmul(h, self.img_proj)
        return _l2_normalize(z)

    def embed_texts(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        emb = T.embedding(self.tok_embed, ids)  # [B, L, e]
        keep = (ids != 0).astype(np.float32)[..., None]
        summed = T.sum_(emb * Tensor(keep), axis=1)
        counts = np.maximum(keep.sum(axis=1), 1.0)
        z = T.matmul(summed / Tensor(counts), self.txt_proj)
        return _l2_normalize(z)

    def fit(self, examples, vocab: Vocabulary, text_len: int, iters: int, batch: int, seed: int = 0):
        params = list(self.params().values())
        from .training import AdamW

        opt = AdamW(self.params(), lr=3e-3)
        for it in range(1, iters + 1):
            rng = make_rng(seed, "scorer-train", it)
            idx = rng.integers(0, len(examples), size=batch)
            images = np.stack([normalize(examples[i].image) for i in idx])
            ids = np.stack([tokenize_words(examples[i].text, vocab, text_len) for i in idx])
            zi = self.embed_images(images)
            zt = self.embed_texts(ids)
            logits = T.matmul(zi, T.swapaxes(zt, 0, 1)) * (1.0 / self.temperature)
            loss = _info_nce(logits) + _info_nce(T.swapaxes(logits, 0, 1))
            grads = T.gradient(loss, params)
            opt.step(dict(zip(self.params().keys(), grads)))
        self.trained = True
        return self


def _l2_normalize(z: Tensor) -> Tensor:
    norm = T.sqrt(T.sum_(z * z, axis=-1, keepdims=True) + 1e-12)
    return z / norm


def _info_nce(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    shifted = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    log_prob = shifted - T.log(T.sum_(T.exp(shifted), axis=1, keepdims=True))
    diag_mask = Tensor(np.eye(n, dtype=np.float32))
    return -T.sum_(log_prob * diag_mask) * (1.0 / n)


def cs_like(images_norm, text_ids, scorer: ContrastiveScorer) -> float:
    """100 x mean cosine similarity of matched (image, text) embeddings."""
    if not scorer.trained:
        raise ConfigError("semantic scorer is untrained; fit it before scoring")
    with T.no_grad():
        zi = scorer.embed_images(np.asarray(images_norm)).data
        zt = scorer.embed_texts(np.asarray(text_ids)).data
    return float(100.0 * np.sum(zi * zt, axis=1).mean())


# attribute matching -----------------------------------------------------------

def _prompt_attributes(tokens) -> tuple:
    color = next((t for t in tokens if t in PALETTE), None)
    pattern = next((t for t in tokens if t in PATTERNS), None)
    return color, pattern


def attribute_match(images_raw, prompts) -> float:
    """Mean fraction of (color, pattern) attributes the detectors recover."""
    scores = []
    for img, tokens in zip(images_raw, prompts):
        color, pattern = _prompt_attributes(tokens)
        hits, total = 0, 0
        if color is not None:
            hits += classify_color(img) == color
            total += 1
        if pattern is not None:
            hits += classify_pattern(img) == pattern
            total += 1
        scores.append(hits / total if total else 0.0)
    return float(np.mean(scores))


def mean_foreground_color(image_raw: np.ndarray) -> np.ndarray:
    fg = foreground_mask(image_raw)
    if not fg.any():
        fg = np.ones(image_raw.shape[1:], dtype=bool)
    return image_raw[:, fg].mean(axis=1)


def style_color_correlation(generated_raw, patches_raw) -> float:
    """Pearson r between generated and patch mean foreground colors (pooled RGB)."""
    gen = np.array([mean_foreground_color(g) for g in generated_raw]).ravel()
    ref = np.array([mean_foreground_color(p) for p in patches_raw]).ravel()
    gen = gen - gen.mean()
    ref = ref - ref.mean()
    denom = np.sqrt((gen**2).sum() * (ref**2).sum()) + 1e-12
    return float((gen * ref).sum() / denom)


# generation + full reports ------------------------------------------------------

def build_condition_pairs(examples, vocab: Vocabulary, cfg: RunConfig, with_style: bool, crop_seed: int = 0):
    """Batched prompt pair from test examples (fresh seeded crops per example)."""
    ids = np.stack(
        [tokenize_words(e.text, vocab, cfg.encoder.text_len) for e in examples]
    )
    p = cfg.data.patch_size
    patches = np.empty((len(examples), 3, p, p), dtype=np.float32)
    raw_patches = np.empty((len(examples), 3, p, p), dtype=np.float32)
    for i, e in enumerate(examples):
        crop = style_crop(e, p, make_rng(crop_seed, "eval-crop", i))
        raw_patches[i] = crop
        patches[i] = mask_background(crop, patch_mask(crop))
    pair = ConditionPair(ids, patches, style_null=not with_style)
    return pair, raw_patches


def generate_images(
    model_fn,
    pair: ConditionPair,
    weights: GuidanceWeights,
    sampler_cfg: SamplerConfig,
    schedule,
    seed: int,
    n: int,
    image_size: int,
) -> np.ndarray:
    """Batched reverse chains; returns raw-pixel images [n, 3, S, S]."""
    rng = make_rng(seed, "generate")
    x0 = generate(
        model_fn, pair, weights, sampler_cfg, schedule, rng, shape=(n, 3, image_size, image_size)
    )
    return np.stack([denormalize(x) for x in x0])


def evaluate_checkpoint(
    model,
    ckpt_stage: str,
    cfg: RunConfig,
    test_examples,
    vocab: Vocabulary,
    scorer: ContrastiveScorer,
    extractor: FeatureExtractor,
    weights: GuidanceWeights,
    sampler_cfg: SamplerConfig,
    n_images: int,
    seed: int = 0,
) -> tuple:
    """Generate from test prompts and compute every metric; returns (report, images)."""
    subset = test_examples[:n_images]
    if len(subset) < n_images:
        raise ConfigError(f"need {n_images} test examples, have {len(test_examples)}")
    schedule = cfg.schedule.build()
    with_style = ckpt_stage == "style"
    pair, _ = build_condition_pairs(subset, vocab, cfg, with_style, crop_seed=seed)
    model_fn = GuidedDenoiser(model, schedule)
    gen_raw = generate_images(
        model_fn, pair, weights, sampler_cfg, schedule, seed, len(subset), cfg.data.image_size
    )
    ref_raw = np.stack([e.image for e in subset])
    gen_feats = extractor.pooled(np.stack([normalize(g) for g in gen_raw]))
    ref_feats = extractor.pooled(np.stack([normalize(r) for r in ref_raw]))
    report = MetricReport(
        fid_like=fid_like(gen_feats, ref_feats),
        lpips_like=lpips_like(
            np.stack([normalize(g) for g in gen_raw]),
            np.stack([normalize(r) for r in ref_raw]),
            extractor,
        ),
        cs_like=cs_like(
            np.stack([normalize(g) for g in gen_raw]), pair.text_ids, scorer
        ),
        attribute_match=attribute_match(gen_raw, [e.text for e in subset]),
        n=len(subset),
    )
    return report, gen_raw


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_COLUMNS})


def ablation_grid(
    model,
    ckpt_stage: str,
    cfg: RunConfig,
    test_examples,
    vocab: Vocabulary,
    scorer: ContrastiveScorer,
    extractor: FeatureExtractor,
    out_dir,
    weights_list=ABLATION_WEIGHTS,
    orders=("style_first", "text_first"),
    n_images: int | None = None,
    steps: int | None = None,
    seed: int = 0,
) -> list:
    """Sweep each condition's weight over `weights_list` (other fixed at 1.0),
    for both orders, and write metrics CSV plus one line-plot PNG per metric."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_images = n_images or cfg.eval.ablation_images
    steps = steps or cfg.eval.ablation_steps
    sampler_cfg = SamplerConfig(kind="ddim", steps=steps, eta=0.0, clamp_x0=True)
    chash = config_hash(cfg)
    rows = []
    for sweep_target in ("style", "text"):
        for order in orders:
            for w in weights_list:
                s_s, s_t = (w, 1.0) if sweep_target == "style" else (1.0, w)
                gw = GuidanceWeights(s_s, s_t, order)
                report, _ = evaluate_checkpoint(
                    model,
                    ckpt_stage,
                    cfg,
                    test_examples,
                    vocab,
                    scorer,
                    extractor,
                    gw,
                    sampler_cfg,
                    n_images,
                    seed=seed,
                )
                rows.append(
                    {
                        "config_hash": chash,
                        "sweep_target": sweep_target,
                        "weight": w,
                        "s_s": s_s,
                        "s_t": s_t,
                        "order": order,
                        "fid_like": report.fid_like,
                        "lpips_like": report.lpips_like,
                        "cs_like": report.cs_like,
                        "attribute_match": report.attribute_match,
                        "n": report.n,
                        "default_setting": s_s == 1.2 and s_t == 1.0 and order == "style_first",
                    }
                )
    columns = [
        "config_hash",
        "sweep_target",
        "weight",
        "s_s",
        "s_t",
        "order",
        "fid_like",
        "lpips_like",
        "cs_like",
        "attribute_match",
        "n",
        "default_setting",
    ]
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    from .plots import plot_ablation_metric

    for metric in ("fid_like", "lpips_like", "cs_like", "attribute_match"):
        plot_ablation_metric(rows, metric, out / f"ablation_{metric}.png")
    return rows
