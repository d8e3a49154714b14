"""Token and style-patch encoders producing width-aligned feature matrices.

The text side embeds attribute tokens with learned positions and runs a few
self-attention blocks. The style side embeds non-overlapping patch windows,
prepends a learned CLS token, and does the same. Both emit [L x d] with a
shared width d so the fusion module can concatenate their projections
length-wise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import SelfAttentionBlock, glorot
from .synthdata import null_style_patch
from .tensor import Tensor

PAD_ID = 0
CLS_ID = 1


class Vocabulary:
    """Dense token -> id map; line number in the vocab file is the id."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[0] != "<pad>" or self.tokens[1] != "<cls>":
            raise ConfigError("vocabulary must start with <pad>, <cls>")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")


@dataclass(frozen=True)
class EncoderConfig:
    text_len: int = 16  # L_T
    width: int = 64  # d, shared by both encoders
    heads: int = 4
    text_layers: int = 2
    style_layers: int = 2
    patch_size: int = 8  # P
    patch_stride: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.patch_size % self.patch_stride:
            raise ConfigError(
                f"patch size {self.patch_size} not divisible by stride {self.patch_stride}"
            )

    @property
    def style_len(self) -> int:  # L_S = (P / stride)^2 + CLS
        return (self.patch_size // self.patch_stride) ** 2 + 1


def tokenize(text: str, vocab: Vocabulary, text_len: int) -> np.ndarray:
    """Known words -> ids, unknown dropped, right-padded/truncated to text_len."""
    ids = [vocab.index[w] for w in text.split() if w in vocab.index]
    ids = ids[:text_len]
    ids += [PAD_ID] * (text_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def tokenize_words(words, vocab: Vocabulary, text_len: int) -> np.ndarray:
    return tokenize(" ".join(words), vocab, text_len)


class TextEncoder:
    """Embedding + learned positions + self-attention stack -> [L_T x d]."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.width
        self.embed = Tensor(
            (rng.standard_normal((vocab_size, d)) / np.sqrt(d)).astype(dtype),
            requires_grad=True,
        )
        self.pos = Tensor(
            (rng.standard_normal((cfg.text_len, d)) * 0.02).astype(dtype),
            requires_grad=True,
        )
        self.blocks = [
            SelfAttentionBlock(d, cfg.heads, rng, dtype, prefix=f"block{i}.")
            for i in range(cfg.text_layers)
        ]

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[-1] != self.cfg.text_len:
            raise ShapeError(f"expected {self.cfg.text_len} ids, got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ShapeError(f"token id outside vocabulary of {self.vocab_size}")
        x = T.embedding(self.embed, ids) + self.pos
        for block in self.blocks:
            x = block(x)
        return x

    def params(self) -> dict:
        out = {"embed": self.embed, "pos": self.pos}
        for block in self.blocks:
            out.update(block.params())
        return out


class StyleEncoder:
    """Non-overlapping patch embedding + CLS + self-attention -> [L_S x d]."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        d = cfg.width
        st = cfg.patch_stride
        self.w_embed = glorot(rng, (3 * st * st, d), dtype)
        self.cls = Tensor((rng.standard_normal((1, d)) * 0.02).astype(dtype), requires_grad=True)
        self.pos = Tensor(
            (rng.standard_normal((cfg.style_len, d)) * 0.02).astype(dtype),
            requires_grad=True,
        )
        self.blocks = [
            SelfAttentionBlock(d, cfg.heads, rng, dtype, prefix=f"block{i}.")
            for i in range(cfg.style_layers)
        ]

    def _embed_windows(self, patch: Tensor) -> Tensor:
        st = self.cfg.patch_stride
        batched = patch.ndim == 4
        b = patch.shape[0] if batched else 1
        p = patch.shape[-1]
        if p % st:
            raise ConfigError(f"patch side {p} not divisible by embed stride {st}")
        n = p // st
        x = T.reshape(patch, (b, 3, n, st, n, st))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # [b, n, n, 3, st, st]
        x = T.reshape(x, (b, n * n, 3 * st * st))
        out = T.matmul(x, self.w_embed)
        return out if batched else out[0]

    def __call__(self, patch) -> Tensor:
        patch = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch))
        batched = patch.ndim == 4
        tokens = self._embed_windows(patch)
        if batched:
            b = patch.shape[0]
            cls = T.reshape(self.cls, (1, 1, self.cfg.width))
            cls = cls + Tensor(np.zeros((b, 1, self.cfg.width), dtype=patch.dtype))
            x = T.concat([cls, tokens], axis=1)
        else:
            x = T.concat([self.cls, tokens], axis=0)
        x = x + self.pos
        for block in self.blocks:
            x = block(x)
        return x

    def params(self) -> dict:
        out = {"w_embed": self.w_embed, "cls": self.cls, "pos": self.pos}
        for block in self.blocks:
            out.update(block.params())
        return out


def null_conditions(cfg: EncoderConfig):
    """All-PAD ids and the blank (background-only) normalized patch."""
    ids = np.zeros(cfg.text_len, dtype=np.int64)
    return ids, null_style_patch(cfg.patch_size)
