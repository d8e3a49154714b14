"""Small shared layers: initializers, linear, layer norm, multi-head attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def he_normal(rng, shape, dtype=np.float32, fan_in=None):
    fan = fan_in if fan_in is not None else int(np.prod(shape[:-1])) or 1
    return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan)).astype(dtype), requires_grad=True)


def glorot(rng, shape, dtype=np.float32):
    fan_in, fan_out = shape[0], shape[-1]
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    if b is not None:
        out = out + b
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm_affine(x, gamma, beta, eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, d] -> [..., heads, L, d/heads]"""
    *lead, length, width = x.shape
    if width % heads:
        raise ShapeError(f"width {width} not divisible by {heads} heads")
    x = T.reshape(x, (*lead, length, heads, width // heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, L, dk] -> [..., L, heads*dk]"""
    x = T.swapaxes(x, -2, -3)
    *lead, length, heads, dk = x.shape
    return T.reshape(x, (*lead, length, heads * dk))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the last two axes, multi-head."""
    dk = q.shape[-1] // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * float(1.0 / np.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    return merge_heads(T.matmul(weights, vh))


class SelfAttentionBlock:
    """Pre-norm transformer block: attention + 4x MLP, both residual."""

    def __init__(self, width: int, heads: int, rng, dtype=np.float32, prefix=""):
        self.heads = heads
        self.prefix = prefix
        d = width
        self.w_qkv = glorot(rng, (d, 3 * d), dtype)
        self.w_out = glorot(rng, (d, d), dtype)
        self.w_up = glorot(rng, (d, 4 * d), dtype)
        self.b_up = zeros_param((4 * d,), dtype)
        self.w_down = glorot(rng, (4 * d, d), dtype)
        self.b_down = zeros_param((d,), dtype)
        self.ln1_g = ones_param((d,), dtype)
        self.ln1_b = zeros_param((d,), dtype)
        self.ln2_g = ones_param((d,), dtype)
        self.ln2_b = zeros_param((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        h = layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = T.matmul(h, self.w_qkv)
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        x = x + T.matmul(attention(q, k, v, self.heads), self.w_out)
        h = layer_norm(x, self.ln2_g, self.ln2_b)
        h = linear(h, self.w_up, self.b_up)
        h = T.silu(h)
        return x + linear(h, self.w_down, self.b_down)

    def params(self) -> dict:
        names = [
            "w_qkv", "w_out", "w_up", "b_up", "w_down", "b_down",
            "ln1_g", "ln1_b", "ln2_g", "ln2_b",
        ]
        return {f"{self.prefix}{n}": getattr(self, n) for n in names}
