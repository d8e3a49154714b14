"""Two-stage training: text-conditioned backbone first, then style fusion.

Stage one trains the denoiser and text encoder with text-only conditioning
under condition dropout. Stage two loads that checkpoint, freezes it (frozen
tensors never enter the gradient tape, so their gradients are identically
zero), zero-initializes the fusion output projection for an exact warm start,
and trains only the style encoder and fusion parameters with both conditions
dropped out independently.

Checkpoints are a single binary file: magic, version, a JSON header carrying
the config echo / stage / iteration / seed plus a blob index, then raw
little-endian float32 parameter blobs. Round trips are bit-exact.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_dict, config_to_dict
from .errors import CheckpointError, ConfigError
from .guidance import ConditionPair, apply_condition_dropout
from .losses import FeatureExtractor, LossWeights, total_loss
from .model import BACKBONE, STYLE, DiffusionModel
from .rng import make_rng
from .schedule import q_sample
from .synthdata import mask_background, normalize, patch_mask, style_crop
from .encoders import tokenize_words, Vocabulary

CHECKPOINT_MAGIC = b"SDCP"
CHECKPOINT_VERSION = 1


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            g = g.data if isinstance(g, T.Tensor) else np.asarray(g)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)


# checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    stage: str
    iteration: int
    seed: int
    config: dict
    blobs: dict

    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)


def save_checkpoint(path, model_params: dict, cfg: RunConfig, stage: str, iteration: int):
    names = sorted(model_params)
    blob_index = []
    offset = 0
    payloads = []
    for name in names:
        data = model_params[name]
        arr = np.ascontiguousarray(data.data if isinstance(data, T.Tensor) else data)
        raw = arr.astype("<f4").tobytes() if arr.dtype != np.dtype("<f4") else arr.tobytes()
        blob_index.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "stage": stage,
            "iteration": iteration,
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "blobs": blob_index,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<4sIQ")
    if len(raw) < head:
        raise CheckpointError(f"{path}: file shorter than the fixed header")
    magic, version, header_len = struct.unpack("<4sIQ", raw[:head])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    if len(raw) < head + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[head : head + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header JSON") from exc
    base = head + header_len
    blobs = {}
    for entry in header["blobs"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated blob '{entry['name']}'")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(entry["shape"])
        blobs[entry["name"]] = arr.copy()
    return Checkpoint(
        version=version,
        stage=header["stage"],
        iteration=header["iteration"],
        seed=header["seed"],
        config=header["config"],
        blobs=blobs,
    )


def load_params_into(model: DiffusionModel, blobs: dict, subset_prefixes=None):
    """Copy checkpoint blobs into matching model tensors, bit-exactly."""
    params = model.params()
    for name, arr in blobs.items():
        if subset_prefixes and not name.startswith(tuple(subset_prefixes)):
            continue
        if name not in params:
            raise CheckpointError(f"checkpoint blob '{name}' has no matching parameter")
        if tuple(params[name].shape) != tuple(arr.shape):
            raise CheckpointError(
                f"blob '{name}' shape {tuple(arr.shape)} != parameter shape {tuple(params[name].shape)}"
            )
        params[name].data = arr.astype(params[name].dtype).copy()


# the two stages ---------------------------------------------------------------

def _batch_text_ids(examples, idx, vocab, text_len):
    return np.stack([tokenize_words(examples[i].text, vocab, text_len) for i in idx])


def _write_log(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "l_simple", "l_vlb", "l_perc", "total"])
        for row in rows:
            writer.writerow(row)


def smoothed_loss(rows, iteration: int, window: int = 100) -> float:
    """Trailing-window mean of total loss at a given 1-based iteration."""
    totals = [r[4] for r in rows if r[0] <= iteration]
    if not totals:
        raise ValueError(f"no logged iterations at or before {iteration}")
    return float(np.mean(totals[-window:]))


def _train_stage(
    model: DiffusionModel,
    stage: str,
    cfg: RunConfig,
    examples,
    vocab: Vocabulary,
    iterations: int,
    batch_size: int,
    lr: float,
    log_rows: list,
):
    if not examples:
        raise ConfigError("training dataset is empty")
    schedule = cfg.schedule.build()
    extractor = FeatureExtractor(seed=cfg.train.extractor_seed)
    weights = LossWeights(cfg.train.lambda_simple, cfg.train.lambda_perceptual)
    dropout = cfg.guidance.dropout()
    model.set_stage(stage)
    trainable = model.trainable_params(stage)
    opt = AdamW(trainable, lr=lr, weight_decay=cfg.train.weight_decay)
    p = cfg.data.patch_size
    t_len = cfg.encoder.text_len

    for it in range(1, iterations + 1):
        rng_it = make_rng(cfg.seed, "train", stage, it)
        idx = rng_it.integers(0, len(examples), size=batch_size)
        x0 = np.stack([normalize(examples[i].image) for i in idx])
        ids = _batch_text_ids(examples, idx, vocab, t_len)
        patches = None
        if stage == STYLE:
            patches = np.empty((batch_size, 3, p, p), dtype=np.float32)
        for slot, i in enumerate(idx):
            pair_rng = make_rng(cfg.seed, "dropout", stage, it, slot)
            crop = None
            if stage == STYLE:
                crop_rng = make_rng(cfg.seed, "crop", it, slot)
                crop = style_crop(examples[i], p, crop_rng)
                crop = mask_background(crop, patch_mask(crop))
            pair = ConditionPair(ids[slot], crop if crop is not None else np.zeros((3, p, p), np.float32))
            pair = apply_condition_dropout(pair, dropout, pair_rng)
            if stage == BACKBONE:
                ids[slot] = pair.text_ids
            else:
                ids[slot] = pair.text_ids
                patches[slot] = pair.style_patch
        t = rng_it.integers(1, schedule.timesteps + 1, size=batch_size)
        noise = rng_it.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, t, schedule, noise)

        tokens = model.cond_tokens(ids, patches if stage == STYLE else None)
        eps_hat, var_coeff = model.denoiser(x_t, t, tokens, schedule)
        loss, parts = total_loss(
            x0, x_t, t, noise, eps_hat, var_coeff, extractor, weights, schedule
        )
        grads = T.gradient(loss, list(trainable.values()))
        opt.step(dict(zip(trainable.keys(), grads)))
        log_rows.append(
            (it, parts["l_simple"], parts["l_vlb"], parts["l_perc"], parts["total"])
        )
    return model


def train_backbone(cfg: RunConfig, examples, vocab: Vocabulary, out_dir) -> Path:
    """Stage one; returns the checkpoint path. Style modules stay untouched."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = DiffusionModel(cfg, len(vocab), with_style=False)
    rows = []
    _train_stage(
        model,
        BACKBONE,
        cfg,
        examples,
        vocab,
        cfg.train.backbone_iters,
        cfg.train.backbone_batch,
        cfg.train.backbone_lr,
        rows,
    )
    _write_log(out / "train_backbone.csv", rows)
    ckpt_path = out / "backbone.ckpt"
    save_checkpoint(ckpt_path, model.params(), cfg, BACKBONE, cfg.train.backbone_iters)
    return ckpt_path


def train_style_stage(cfg: RunConfig, examples, vocab: Vocabulary, backbone_ckpt, out_dir) -> Path:
    """Stage two: frozen backbone, fresh style encoder + zero-init fusion."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(backbone_ckpt)
    if ckpt.stage != BACKBONE:
        raise CheckpointError(f"{backbone_ckpt}: expected a backbone checkpoint, got stage '{ckpt.stage}'")
    model = DiffusionModel(cfg, len(vocab), with_style=True)
    load_params_into(model, ckpt.blobs)
    model.sca.init_identity()
    rows = []
    _train_stage(
        model,
        STYLE,
        cfg,
        examples,
        vocab,
        cfg.train.style_iters,
        cfg.train.style_batch,
        cfg.train.style_lr,
        rows,
    )
    _write_log(out / "train_style.csv", rows)
    ckpt_path = out / "style.ckpt"
    save_checkpoint(ckpt_path, model.params(), cfg, STYLE, cfg.train.style_iters)
    return ckpt_path


def load_model(ckpt_path) -> tuple:
    """Rebuild a model from a checkpoint; returns (model, checkpoint)."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.run_config()
    vocab_rows = ckpt.blobs["text.embed"].shape[0]
    model = DiffusionModel(cfg, vocab_rows, with_style=ckpt.stage == STYLE)
    load_params_into(model, ckpt.blobs)
    model.set_stage(ckpt.stage)
    return model, ckpt
