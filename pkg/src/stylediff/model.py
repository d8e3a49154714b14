"""Model assembly: encoders + fusion + denoiser behind one parameter namespace.

A backbone-stage model carries the text encoder and denoiser; the full model
adds the style encoder and the skip-cross-attention fusion. `GuidedDenoiser`
adapts a model to the (x_t, t, pair) -> eps callable the guidance and sampler
layers expect, counting evaluations and caching the encodings of null
conditions (pure functions of constants) across a sampling run.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .denoiser import Denoiser
from .encoders import StyleEncoder, TextEncoder, null_conditions
from .errors import ConfigError
from .guidance import ConditionPair
from .rng import make_rng
from .sca import SkipCrossAttention
from .schedule import NoiseSchedule
from .tensor import Tensor, no_grad

BACKBONE = "backbone"
STYLE = "style"


class DiffusionModel:
    def __init__(self, cfg: RunConfig, vocab_size: int, with_style: bool, dtype=np.float32):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.with_style = with_style
        self.dtype = dtype
        seed = cfg.seed
        self.text_encoder = TextEncoder(
            cfg.encoder, vocab_size, make_rng(seed, "init", "text"), dtype
        )
        self.denoiser = Denoiser(cfg.denoiser, make_rng(seed, "init", "denoiser"), dtype)
        self.style_encoder = None
        self.sca = None
        if with_style:
            self.style_encoder = StyleEncoder(
                cfg.encoder, make_rng(seed, "init", "style"), dtype
            )
            self.sca = SkipCrossAttention(
                cfg.encoder.width, cfg.encoder.heads, make_rng(seed, "init", "sca"), dtype
            )

    def params(self) -> dict:
        out = {}
        out.update({f"text.{k}": v for k, v in self.text_encoder.params().items()})
        out.update({f"denoiser.{k}": v for k, v in self.denoiser.params().items()})
        if self.with_style:
            out.update({f"style.{k}": v for k, v in self.style_encoder.params().items()})
            out.update({f"sca.{k}": v for k, v in self.sca.params().items()})
        return out

    def frozen_names(self, stage: str) -> set:
        if stage == STYLE:
            return {k for k in self.params() if k.startswith(("text.", "denoiser."))}
        return set()

    def trainable_params(self, stage: str) -> dict:
        frozen = self.frozen_names(stage)
        return {k: v for k, v in self.params().items() if k not in frozen}

    def set_stage(self, stage: str):
        """Mark requires_grad per stage; frozen tensors never join the tape."""
        frozen = self.frozen_names(stage)
        for name, p in self.params().items():
            p.requires_grad = name not in frozen
        return self

    def cond_tokens(self, ids: np.ndarray, patches=None) -> Tensor:
        """Conditioning tokens: text features, fused with style when present."""
        f_t = self.text_encoder(ids)
        if not self.with_style:
            return f_t
        if patches is None:
            raise ConfigError("full model needs style patches (or explicit nulls)")
        f_s = self.style_encoder(patches)
        return self.sca(f_t, f_s)


class GuidedDenoiser:
    """(x_t, t, pair) -> eps adapter with a null-encoding cache and call counter."""

    def __init__(self, model: DiffusionModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self.calls = 0
        self._null_text_feats = None
        self._null_style_feats = None

    def _text_feats(self, pair: ConditionPair) -> Tensor:
        if pair.text_null:
            if self._null_text_feats is None:
                ids, _ = null_conditions(self.model.cfg.encoder)
                self._null_text_feats = self.model.text_encoder(ids)
            return self._null_text_feats
        return self.model.text_encoder(pair.text_ids)

    def _style_feats(self, pair: ConditionPair) -> Tensor:
        if pair.style_null:
            if self._null_style_feats is None:
                _, patch = null_conditions(self.model.cfg.encoder)
                self._null_style_feats = self.model.style_encoder(patch)
            return self._null_style_feats
        return self.model.style_encoder(pair.style_patch)

    @staticmethod
    def _align_batch(feats: Tensor, batch: int) -> Tensor:
        if feats.ndim == 3:
            return feats
        return Tensor(np.broadcast_to(feats.data, (batch, *feats.shape)).copy())

    def __call__(self, x_t, t, pair: ConditionPair) -> np.ndarray:
        self.calls += 1
        arr = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        batch = arr.shape[0] if arr.ndim == 4 else None
        with no_grad():
            f_t = self._text_feats(pair)
            if self.model.with_style:
                f_s = self._style_feats(pair)
                if batch and (f_t.ndim == 3 or f_s.ndim == 3):
                    f_t = self._align_batch(f_t, batch)
                    f_s = self._align_batch(f_s, batch)
                tokens = self.model.sca(f_t, f_s)
            else:
                tokens = f_t
            eps, _ = self.model.denoiser(x_t, t, tokens, self.schedule)
        return eps.data
