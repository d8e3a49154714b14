"""Skip cross-attention fusion of text tokens with style tokens.

Text features provide the queries plus one key/value set; style features
provide a second key/value set. Style keys/values are concatenated ahead of
the text ones along the length axis, multi-head attention mixes them, and a
residual skip adds the text features back, so a zero output projection makes
the whole block an exact identity on the text stream. That zero-init is the
warm start used when fine-tuning starts from a frozen text-only backbone.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import attention, glorot, zeros_param
from .tensor import Tensor


class SkipCrossAttention:
    def __init__(self, width: int, heads: int, rng, dtype=np.float32):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.w_q = glorot(rng, (width, width), dtype)
        self.w_kt = glorot(rng, (width, width), dtype)
        self.w_vt = glorot(rng, (width, width), dtype)
        self.w_ks = glorot(rng, (width, width), dtype)
        self.w_vs = glorot(rng, (width, width), dtype)
        self.w_out = glorot(rng, (width, width), dtype)

    def init_identity(self) -> "SkipCrossAttention":
        """Zero the output projection so fusion starts as the identity on f_T."""
        self.w_out = zeros_param(self.w_out.shape, self.w_out.dtype)
        return self

    def concatenated_keys_values(self, f_t: Tensor, f_s: Tensor):
        """Projected K-hat/V-hat with style entries first, then text entries."""
        k_t = T.matmul(f_t, self.w_kt)
        v_t = T.matmul(f_t, self.w_vt)
        k_s = T.matmul(f_s, self.w_ks)
        v_s = T.matmul(f_s, self.w_vs)
        return T.concat([k_s, k_t], axis=-2), T.concat([v_s, v_t], axis=-2)

    def __call__(self, f_t: Tensor, f_s: Tensor) -> Tensor:
        if f_t.shape[-1] != self.width or f_s.shape[-1] != self.width:
            raise ShapeError(
                f"feature widths {f_t.shape[-1]}/{f_s.shape[-1]} != configured {self.width}"
            )
        q = T.matmul(f_t, self.w_q)
        k, v = self.concatenated_keys_values(f_t, f_s)
        mixed = attention(q, k, v, self.heads)
        return T.matmul(mixed, self.w_out) + f_t

    def params(self) -> dict:
        return {
            "w_q": self.w_q,
            "w_kt": self.w_kt,
            "w_vt": self.w_vt,
            "w_ks": self.w_ks,
            "w_vs": self.w_vs,
            "w_out": self.w_out,
        }


def sca_fuse(f_t, f_s, module: SkipCrossAttention) -> Tensor:
    f_t = f_t if isinstance(f_t, Tensor) else Tensor(np.asarray(f_t))
    f_s = f_s if isinstance(f_s, Tensor) else Tensor(np.asarray(f_s))
    return module(f_t, f_s)
