"""Classifier-free guidance over one or two conditions.

Training side: each condition of a pair is independently replaced by its null
state (all-PAD ids / blank sentinel patch) with probability 1 - keep. At
inference the model is evaluated at up to three condition states and the
predictions are linearly composed; which condition occupies the first slot is
chosen by `order`, and when one condition is already null the composition
degrades continuously to single-condition guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .synthdata import null_style_patch
from .tensor import Tensor

STYLE_FIRST = "style_first"
TEXT_FIRST = "text_first"


@dataclass(frozen=True)
class GuidanceWeights:
    style_scale: float = 1.2  # s_S
    text_scale: float = 1.0  # s_T
    order: str = STYLE_FIRST

    def __post_init__(self):
        if not (np.isfinite(self.style_scale) and self.style_scale >= 0):
            raise ConfigError(f"style scale must be finite and >= 0, got {self.style_scale}")
        if not (np.isfinite(self.text_scale) and self.text_scale >= 0):
            raise ConfigError(f"text scale must be finite and >= 0, got {self.text_scale}")
        if self.order not in (STYLE_FIRST, TEXT_FIRST):
            raise ConfigError(f"order must be {STYLE_FIRST} or {TEXT_FIRST}, got {self.order!r}")


@dataclass(frozen=True)
class DropoutConfig:
    keep_text: float = 0.8  # p_cond_T
    keep_style: float = 0.8  # p_cond_S

    def __post_init__(self):
        for p in (self.keep_text, self.keep_style):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"keep probability {p} outside [0, 1]")


@dataclass(frozen=True)
class ConditionPair:
    """Text ids and style patch with explicit null flags, kept in sync."""

    text_ids: np.ndarray
    style_patch: np.ndarray
    text_null: bool = False
    style_null: bool = False

    @classmethod
    def null(cls, text_len: int, patch_size: int) -> "ConditionPair":
        return cls(
            np.zeros(text_len, dtype=np.int64),
            null_style_patch(patch_size),
            text_null=True,
            style_null=True,
        )

    def with_null_text(self) -> "ConditionPair":
        return replace(
            self, text_ids=np.zeros_like(self.text_ids), text_null=True
        )

    def with_null_style(self) -> "ConditionPair":
        return replace(
            self,
            style_patch=null_style_patch(self.style_patch.shape[-1]),
            style_null=True,
        )


def apply_condition_dropout(pair: ConditionPair, cfg: DropoutConfig, rng) -> ConditionPair:
    """Independently null each condition with probability 1 - keep."""
    if rng.random() >= cfg.keep_text:
        pair = pair.with_null_text()
    if rng.random() >= cfg.keep_style:
        pair = pair.with_null_style()
    return pair


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def compose_single(eps_uncond, eps_cond, s: float) -> np.ndarray:
    """uncond + s (cond - uncond); s of exactly 1 (or 0) short-circuits
    so the reductions hold bitwise, not just to rounding."""
    u, c = _data(eps_uncond), _data(eps_cond)
    if u.shape != c.shape:
        raise ShapeError(f"shape mismatch {u.shape} vs {c.shape}")
    if s == 1.0:
        return c.copy()
    if s == 0.0:
        return u.copy()
    return u + s * (c - u)


def compose_dual(e_nn, e_1n, e_12, s1: float, s2: float) -> np.ndarray:
    """nn + s1 (1n - nn) + s2 (12 - 1n): two-condition extrapolation."""
    nn, c1, c12 = _data(e_nn), _data(e_1n), _data(e_12)
    if not (nn.shape == c1.shape == c12.shape):
        raise ShapeError(f"shape mismatch {nn.shape}/{c1.shape}/{c12.shape}")
    if s1 == 1.0 and s2 == 1.0:
        return c12.copy()
    if s2 == 0.0:
        return compose_single(nn, c1, s1)
    return nn + s1 * (c1 - nn) + s2 * (c12 - c1)


def guided_eps(x_t, t, pair: ConditionPair, weights: GuidanceWeights, model) -> np.ndarray:
    """Compose model calls at the condition states dictated by the order.

    `model` is any callable (x_t, t, pair) -> eps. Exactly 3 evaluations with
    both conditions live, 2 with one, 1 with none.
    """
    null_pair = ConditionPair.null(pair.text_ids.shape[-1], pair.style_patch.shape[-1])
    text_live = not pair.text_null
    style_live = not pair.style_null

    if not text_live and not style_live:
        return _data(model(x_t, t, null_pair))

    if text_live != style_live:
        scale = weights.text_scale if text_live else weights.style_scale
        e_uncond = model(x_t, t, null_pair)
        e_cond = model(x_t, t, pair)
        return compose_single(e_uncond, e_cond, scale)

    e_nn = model(x_t, t, null_pair)
    if weights.order == STYLE_FIRST:
        e_1n = model(x_t, t, pair.with_null_text())
        e_12 = model(x_t, t, pair)
        return compose_dual(e_nn, e_1n, e_12, weights.style_scale, weights.text_scale)
    e_1n = model(x_t, t, pair.with_null_style())
    e_12 = model(x_t, t, pair)
    return compose_dual(e_nn, e_1n, e_12, weights.text_scale, weights.style_scale)
