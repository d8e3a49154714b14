"""Procedural garment renderer: small images with controlled semantics.

Each example is a silhouette drawn from a fixed per-category template, filled
with a two-tone pattern anchored to the image grid, on a uniform light-gray
background. Text tokens name exactly the rendered category/color/pattern
(plus a sleeve attribute where it applies), so attribute matching against a
prompt can be scored without any learned classifier.

Raw images live in [0, 255]; `normalize` maps to [-1, 1]; `mask_background`
first writes the -255 sentinel into background pixels so they land at exactly
-3.0 after normalization and can never collide with real content.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import make_rng

BACKGROUND = 230.0
SENTINEL = -255.0

PALETTE = {
    "red": (220.0, 45.0, 45.0),
    "green": (60.0, 180.0, 75.0),
    "blue": (50.0, 90.0, 220.0),
    "yellow": (235.0, 220.0, 60.0),
    "purple": (150.0, 60.0, 200.0),
    "orange": (240.0, 150.0, 50.0),
    "teal": (45.0, 190.0, 180.0),
    "brown": (140.0, 90.0, 50.0),
}

CATEGORIES = ("tshirt", "tank", "dress", "pants", "skirt", "jacket")
PATTERNS = ("solid", "stripes", "checks", "dots")
SLEEVES = ("shortsleeve", "longsleeve")
SLEEVED = ("tshirt", "jacket")


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 16
    patch_size: int = 8
    categories: tuple = CATEGORIES
    colors: tuple = tuple(PALETTE)
    patterns: tuple = PATTERNS
    background: float = BACKGROUND
    stripe_widths: tuple = (1, 2)
    check_blocks: tuple = (2, 4)
    dot_spacings: tuple = (2, 3)
    accent_shades: tuple = (0.35, 0.6)


@dataclass
class SynthExample:
    image: np.ndarray  # [3, S, S] raw [0, 255]
    mask: np.ndarray  # [S, S] float32, 1 = foreground
    text: tuple  # token strings describing the render
    style_patch: np.ndarray  # [3, P, P] raw pixel space
    seed: int


# silhouette templates -------------------------------------------------------

def _rect(mask, s, r0, r1, c0, c1):
    mask[int(r0 * s) : int(r1 * s), int(c0 * s) : int(c1 * s)] = True


def _trapezoid(mask, s, r0, r1, top_half_w, bottom_half_w):
    rows = range(int(r0 * s), int(r1 * s))
    n = max(len(rows) - 1, 1)
    for i, r in enumerate(rows):
        half = top_half_w + (bottom_half_w - top_half_w) * i / n
        c0, c1 = int((0.5 - half) * s), int((0.5 + half) * s)
        mask[r, c0:c1] = True


def category_template(category: str, size: int, sleeve: str | None = None) -> np.ndarray:
    """Fixed boolean silhouette for a category (and sleeve variant)."""
    m = np.zeros((size, size), dtype=bool)
    s = size
    if category == "tshirt":
        _rect(m, s, 3 / 16, 13 / 16, 4 / 16, 12 / 16)
        arm_r1 = 12 / 16 if sleeve == "longsleeve" else 7 / 16
        _rect(m, s, 3 / 16, arm_r1, 2 / 16, 4 / 16)
        _rect(m, s, 3 / 16, arm_r1, 12 / 16, 14 / 16)
    elif category == "tank":
        _rect(m, s, 3 / 16, 13 / 16, 4 / 16, 12 / 16)
        _rect(m, s, 1 / 16, 3 / 16, 5 / 16, 7 / 16)
        _rect(m, s, 1 / 16, 3 / 16, 9 / 16, 11 / 16)
    elif category == "dress":
        _rect(m, s, 2 / 16, 7 / 16, 5 / 16, 11 / 16)
        _trapezoid(m, s, 7 / 16, 14 / 16, 3 / 16, 6 / 16)
    elif category == "pants":
        _rect(m, s, 2 / 16, 5 / 16, 4 / 16, 12 / 16)
        _rect(m, s, 5 / 16, 14 / 16, 4 / 16, 7 / 16)
        _rect(m, s, 5 / 16, 14 / 16, 9 / 16, 12 / 16)
    elif category == "skirt":
        _rect(m, s, 3 / 16, 5 / 16, 5 / 16, 11 / 16)
        _trapezoid(m, s, 5 / 16, 13 / 16, 3 / 16, 6 / 16)
    elif category == "jacket":
        _rect(m, s, 3 / 16, 13 / 16, 4 / 16, 12 / 16)
        m[:, int(7.5 / 16 * s) : int(8.5 / 16 * s)] &= False  # zip gap
        arm_r1 = 12 / 16 if sleeve == "longsleeve" else 7 / 16
        _rect(m, s, 3 / 16, arm_r1, 2 / 16, 4 / 16)
        _rect(m, s, 3 / 16, arm_r1, 12 / 16, 14 / 16)
    else:
        raise ConfigError(f"unknown category {category!r}")
    return m


# pattern fills ---------------------------------------------------------------

def _pattern_field(pattern: str, size: int, params: dict) -> np.ndarray:
    """Boolean accent map over the full image grid, anchored at (0, 0)."""
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    if pattern == "solid":
        return np.zeros((size, size), dtype=bool)
    if pattern == "stripes":
        w = params["width"]
        idx = r if params["orientation"] == "h" else c
        return (idx // w) % 2 == 1
    if pattern == "checks":
        b = params["block"]
        return ((r // b) + (c // b)) % 2 == 1
    if pattern == "dots":
        sp = params["spacing"]
        return (r % sp == sp // 2) & (c % sp == sp // 2)
    raise ConfigError(f"unknown pattern {pattern!r}")


def render_image(cfg: GeneratorConfig, category, color, pattern, params, sleeve=None):
    """Rasterize one garment; returns (image [3,S,S] raw, mask [S,S])."""
    s = cfg.image_size
    mask = category_template(category, s, sleeve)
    base = np.array(PALETTE[color])
    accent = base * params.get("shade", 1.0)
    accent_map = _pattern_field(pattern, s, params)
    img = np.full((3, s, s), cfg.background, dtype=np.float32)
    fg_color = np.where(accent_map[None, :, :], accent[:, None, None], base[:, None, None])
    img = np.where(mask[None, :, :], fg_color, img).astype(np.float32)
    return img, mask.astype(np.float32)


def _draw_params(cfg: GeneratorConfig, pattern: str, rng) -> dict:
    params = {}
    if pattern != "solid":
        params["shade"] = float(rng.choice(cfg.accent_shades))
    if pattern == "stripes":
        params["orientation"] = str(rng.choice(("h", "v")))
        params["width"] = int(rng.choice(cfg.stripe_widths))
    elif pattern == "checks":
        params["block"] = int(rng.choice(cfg.check_blocks))
    elif pattern == "dots":
        params["spacing"] = int(rng.choice(cfg.dot_spacings))
    return params


def synthesize_example(cfg: GeneratorConfig, seed: int) -> SynthExample:
    """Deterministic render for (cfg, seed); text tokens describe it exactly."""
    rng = make_rng(seed, "synth")
    category = str(rng.choice(cfg.categories))
    color = str(rng.choice(cfg.colors))
    pattern = str(rng.choice(cfg.patterns))
    sleeve = str(rng.choice(SLEEVES)) if category in SLEEVED else None
    params = _draw_params(cfg, pattern, rng)
    image, mask = render_image(cfg, category, color, pattern, params, sleeve)
    text = [category, color, pattern] + ([sleeve] if sleeve else [])
    patch = style_crop_arrays(image, mask, cfg.patch_size, rng)
    return SynthExample(image, mask, tuple(text), patch, seed)


# style crops -----------------------------------------------------------------

def style_crop_arrays(image: np.ndarray, mask: np.ndarray, p: int, rng) -> np.ndarray:
    """P x P window with >= 95% foreground, or the best window after 100 tries."""
    s = mask.shape[0]
    if p > s:
        raise ConfigError(f"patch size {p} exceeds image side {s}")
    span = s - p + 1
    for _ in range(100):
        r = int(rng.integers(0, span))
        c = int(rng.integers(0, span))
        if mask[r : r + p, c : c + p].mean() >= 0.95:
            return image[:, r : r + p, c : c + p].copy()
    # fall back to the max-coverage window (first one on ties)
    best, best_cov = (0, 0), -1.0
    for r in range(span):
        for c in range(span):
            cov = mask[r : r + p, c : c + p].mean()
            if cov > best_cov:
                best, best_cov = (r, c), cov
    r, c = best
    return image[:, r : r + p, c : c + p].copy()


def style_crop(example: SynthExample, p: int, rng) -> np.ndarray:
    return style_crop_arrays(example.image, example.mask, p, rng)


def patch_mask(patch_raw: np.ndarray, background: float = BACKGROUND) -> np.ndarray:
    """Foreground mask of a raw crop; palette colors never equal the background."""
    is_bg = np.all(patch_raw == background, axis=0)
    return (~is_bg).astype(np.float32)


# pixel-space transforms ------------------------------------------------------

def normalize(image_raw: np.ndarray) -> np.ndarray:
    return (image_raw / 127.5 - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 127.5, 0.0, 255.0)


def mask_background(image_raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Sentinel out the background, then normalize: background -> exactly -3.0."""
    masked = np.where(mask[None, :, :] > 0, image_raw, SENTINEL)
    return normalize(masked)


def null_style_patch(patch_size: int) -> np.ndarray:
    """Blank (background-only) patch in normalized space: constant -3.0."""
    return np.full((3, patch_size, patch_size), SENTINEL / 127.5 - 1.0, dtype=np.float32)


# by-construction attribute detectors ----------------------------------------

def foreground_mask(image_raw: np.ndarray, background: float = BACKGROUND, threshold: float = 25.0) -> np.ndarray:
    dev = np.abs(image_raw - background).max(axis=0)
    return dev > threshold


def classify_color(image_raw: np.ndarray, background: float = BACKGROUND) -> str:
    """Nearest palette hue (cosine on mean foreground RGB; shading-invariant)."""
    fg = foreground_mask(image_raw, background)
    if not fg.any():
        fg = np.ones(image_raw.shape[1:], dtype=bool)
    mean_rgb = image_raw[:, fg].mean(axis=1)
    norm = np.linalg.norm(mean_rgb) + 1e-9
    best, best_cos = None, -2.0
    for name, rgb in PALETTE.items():
        ref = np.array(rgb)
        cos = float(mean_rgb @ ref / (norm * np.linalg.norm(ref)))
        if cos > best_cos:
            best, best_cos = name, cos
    return best


def classify_pattern(image_raw: np.ndarray, background: float = BACKGROUND) -> str:
    """Accent-structure heuristics: band rows -> stripes, blocks -> checks."""
    fg = foreground_mask(image_raw, background)
    if fg.sum() < 4:
        return "solid"
    lum = image_raw.mean(axis=0)
    vals = lum[fg]
    lo, hi = vals.min(), vals.max()
    if hi - lo < 0.18 * max(hi, 1.0):
        return "solid"
    accent = (lum < (lo + hi) / 2.0) & fg
    frac = accent.sum() / fg.sum()
    if frac < 0.05:
        return "solid"
    if frac < 0.32:
        return "dots"

    def band_score(axis):
        counts_fg = fg.sum(axis=axis)
        counts_ac = accent.sum(axis=axis)
        lines = counts_fg >= 3
        if lines.sum() < 4:
            return 0.0
        ratio = counts_ac[lines] / counts_fg[lines]
        return ((ratio >= 0.8) | (ratio <= 0.2)).mean()

    if max(band_score(0), band_score(1)) >= 0.8:
        return "stripes"
    return "checks"


# on-disk dataset -------------------------------------------------------------

_RECORD_MAGIC = b"SREC"
_RECORD_VERSION = 1


def write_record(path: Path, example: SynthExample, vocab_index: dict):
    ids = [vocab_index[tok] for tok in example.text]
    c, h, w = example.image.shape
    p = example.style_patch.shape[-1]
    header = struct.pack(
        "<4sIQ5I", _RECORD_MAGIC, _RECORD_VERSION, example.seed, c, h, w, p, len(ids)
    )
    body = struct.pack(f"<{len(ids)}I", *ids)
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
        f.write(example.image.astype("<f4").tobytes())
        f.write(example.mask.astype("<f4").tobytes())
        f.write(example.style_patch.astype("<f4").tobytes())


def read_record(path: Path, vocab_tokens: list) -> SynthExample:
    raw = Path(path).read_bytes()
    head_size = struct.calcsize("<4sIQ5I")
    magic, version, seed, c, h, w, p, n_ids = struct.unpack("<4sIQ5I", raw[:head_size])
    if magic != _RECORD_MAGIC or version != _RECORD_VERSION:
        raise ConfigError(f"{path}: not a dataset record (magic/version mismatch)")
    off = head_size
    ids = struct.unpack(f"<{n_ids}I", raw[off : off + 4 * n_ids])
    off += 4 * n_ids
    img = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    off += 4 * c * h * w
    mask = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w)
    off += 4 * h * w
    patch = np.frombuffer(raw, dtype="<f4", count=3 * p * p, offset=off).reshape(3, p, p)
    text = tuple(vocab_tokens[i] for i in ids)
    return SynthExample(img.copy(), mask.copy(), text, patch.copy(), seed)


def dataset_vocab_tokens(cfg: GeneratorConfig) -> list:
    words = sorted(cfg.categories) + sorted(cfg.colors) + sorted(cfg.patterns) + sorted(SLEEVES)
    return ["<pad>", "<cls>"] + words


def write_dataset(out_dir, cfg: GeneratorConfig, n_train: int, n_test: int, seed_offset: int = 0):
    """Seeds (offset+) 0..n_train-1 are the train split, the next n_test the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = dataset_vocab_tokens(cfg)
    index = {tok: i for i, tok in enumerate(tokens)}
    (out / "vocab.txt").write_text("\n".join(tokens) + "\n")
    rows = []
    for i in range(n_train + n_test):
        seed = seed_offset + i
        ex = synthesize_example(cfg, seed)
        write_record(out / f"{seed:08d}.rec", ex, index)
        split = "train" if i < n_train else "test"
        category, color, pattern = ex.text[:3]
        rows.append((seed, category, color, pattern, split))
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["seed", "category", "color", "pattern", "split"])
        writer.writerows(rows)


def load_dataset(data_dir):
    """Returns (train_examples, test_examples, vocab_tokens)."""
    data = Path(data_dir)
    tokens = data.joinpath("vocab.txt").read_text().splitlines()
    train, test = [], []
    with open(data / "manifest.csv") as f:
        for row in csv.DictReader(f):
            ex = read_record(data / f"{int(row['seed']):08d}.rec", tokens)
            (train if row["split"] == "train" else test).append(ex)
    return train, test, tokens
