"""Conditional noise-prediction network: a small U-shaped conv net.

Spatial features attend to the conditioning token matrix (text tokens during
backbone training, fused text+style tokens afterwards) at every attention
site: each level listed in `attn_levels` plus the bottleneck. Timestep
embeddings are added inside every residual block. The final convolution is
zero-initialized so an untrained model predicts zero noise; with the variance
head enabled it emits a second 3-channel map squashed to [0, 1], the
interpolation coefficient between the two log-variance extremes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, TimestepError
from .nn import glorot, he_normal, ones_param, zeros_param
from .schedule import NoiseSchedule
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    base_width: int = 24
    channel_mults: tuple = (1, 2)
    res_blocks: int = 2
    attn_levels: tuple = (1,)
    heads: int = 4
    time_width: int = 64
    cond_width: int = 64
    groups: int = 8
    variance_head: bool = False

    def __post_init__(self):
        down_factor = 2 ** (len(self.channel_mults) - 1)
        if self.image_size % down_factor:
            raise ConfigError(
                f"image size {self.image_size} not divisible by 2^{len(self.channel_mults) - 1}"
            )
        for m in self.channel_mults:
            if (self.base_width * m) % self.groups:
                raise ConfigError("every level width must divide by the norm group count")
            if (self.base_width * m) % self.heads:
                raise ConfigError("every level width must divide by the head count")


def sinusoid_features(t, width: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos ladder: even slots sin(t w_i), odd slots cos(t w_i)."""
    t = np.asarray(t, dtype=np.float64)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[..., None] * freqs
    feats = np.empty(t.shape + (width,), dtype=np.float64)
    feats[..., 0::2] = np.sin(angles)
    feats[..., 1::2] = np.cos(angles)
    return feats.astype(dtype)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    return T.group_norm_affine(x, gamma, beta, groups, eps)


class Conv:
    def __init__(self, c_in, c_out, k, rng, dtype=np.float32, stride=1, zero=False):
        self.stride = stride
        self.pad = k // 2
        if zero:
            self.w = zeros_param((c_out, c_in, k, k), dtype)
        else:
            self.w = he_normal(rng, (c_out, c_in, k, k), dtype, fan_in=c_in * k * k)
        self.b = zeros_param((c_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, stride=self.stride, padding=self.pad)
        return out + T.reshape(self.b, (1, -1, 1, 1))

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ResBlock:
    """GN -> SiLU -> conv, add projected timestep embedding, GN -> SiLU -> conv."""

    def __init__(self, c_in, c_out, time_width, groups, rng, dtype=np.float32):
        self.groups = groups
        self.gn1_g = ones_param((c_in,), dtype)
        self.gn1_b = zeros_param((c_in,), dtype)
        self.conv1 = Conv(c_in, c_out, 3, rng, dtype)
        self.w_temb = glorot(rng, (time_width, c_out), dtype)
        self.b_temb = zeros_param((c_out,), dtype)
        self.gn2_g = ones_param((c_out,), dtype)
        self.gn2_b = zeros_param((c_out,), dtype)
        self.conv2 = Conv(c_out, c_out, 3, rng, dtype)
        self.skip = Conv(c_in, c_out, 1, rng, dtype) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = group_norm(x, self.gn1_g, self.gn1_b, self.groups)
        h = self.conv1(T.silu(h))
        shift = T.matmul(T.silu(temb), self.w_temb) + self.b_temb
        h = h + T.reshape(shift, (shift.shape[0], -1, 1, 1))
        h = group_norm(h, self.gn2_g, self.gn2_b, self.groups)
        h = self.conv2(T.silu(h))
        return h + (self.skip(x) if self.skip else x)

    def params(self, prefix):
        out = {
            f"{prefix}.gn1_g": self.gn1_g,
            f"{prefix}.gn1_b": self.gn1_b,
            f"{prefix}.w_temb": self.w_temb,
            f"{prefix}.b_temb": self.b_temb,
            f"{prefix}.gn2_g": self.gn2_g,
            f"{prefix}.gn2_b": self.gn2_b,
        }
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        if self.skip:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class CrossAttnBlock:
    """Flattened spatial queries attend to the conditioning tokens."""

    def __init__(self, c, cond_width, heads, groups, rng, dtype=np.float32):
        self.heads = heads
        self.groups = groups
        self.gn_g = ones_param((c,), dtype)
        self.gn_b = zeros_param((c,), dtype)
        self.w_q = glorot(rng, (c, c), dtype)
        self.w_k = glorot(rng, (cond_width, c), dtype)
        self.w_v = glorot(rng, (cond_width, c), dtype)
        self.w_o = glorot(rng, (c, c), dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        from .nn import attention

        b, c, h, w = x.shape
        normed = group_norm(x, self.gn_g, self.gn_b, self.groups)
        flat = T.swapaxes(T.reshape(normed, (b, c, h * w)), -1, -2)  # [b, hw, c]
        q = T.matmul(flat, self.w_q)
        k = T.matmul(cond, self.w_k)
        v = T.matmul(cond, self.w_v)
        mixed = attention(q, k, v, self.heads)
        out = T.matmul(mixed, self.w_o)
        out = T.reshape(T.swapaxes(out, -1, -2), (b, c, h, w))
        return x + out

    def params(self, prefix):
        return {
            f"{prefix}.gn_g": self.gn_g,
            f"{prefix}.gn_b": self.gn_b,
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        base, tw, gw = cfg.base_width, cfg.time_width, cfg.groups
        self.time_w1 = glorot(rng, (tw, tw), dtype)
        self.time_b1 = zeros_param((tw,), dtype)
        self.time_w2 = glorot(rng, (tw, tw), dtype)
        self.time_b2 = zeros_param((tw,), dtype)
        self.conv_in = Conv(cfg.channels, base, 3, rng, dtype)

        widths = [base * m for m in cfg.channel_mults]
        self.down_res, self.down_attn, self.downs = [], [], []
        c_prev = base
        for i, c_out in enumerate(widths):
            res_list, attn_list = [], []
            for _ in range(cfg.res_blocks):
                res_list.append(ResBlock(c_prev, c_out, tw, gw, rng, dtype))
                attn_list.append(
                    CrossAttnBlock(c_out, cfg.cond_width, cfg.heads, gw, rng, dtype)
                    if i in cfg.attn_levels
                    else None
                )
                c_prev = c_out
            self.down_res.append(res_list)
            self.down_attn.append(attn_list)
            self.downs.append(Conv(c_out, c_out, 3, rng, dtype, stride=2) if i < len(widths) - 1 else None)

        c_mid = widths[-1]
        self.mid_res1 = ResBlock(c_mid, c_mid, tw, gw, rng, dtype)
        self.mid_attn = CrossAttnBlock(c_mid, cfg.cond_width, cfg.heads, gw, rng, dtype)
        self.mid_res2 = ResBlock(c_mid, c_mid, tw, gw, rng, dtype)

        self.up_res, self.up_attn, self.ups = [], [], []
        for i in reversed(range(len(widths))):
            c_out = widths[i]
            res_list, attn_list = [], []
            for _ in range(cfg.res_blocks):
                res_list.append(ResBlock(2 * c_out, c_out, tw, gw, rng, dtype))
                attn_list.append(
                    CrossAttnBlock(c_out, cfg.cond_width, cfg.heads, gw, rng, dtype)
                    if i in cfg.attn_levels
                    else None
                )
            self.up_res.append(res_list)
            self.up_attn.append(attn_list)
            self.ups.append(Conv(c_out, widths[i - 1], 3, rng, dtype) if i > 0 else None)

        out_ch = cfg.channels * (2 if cfg.variance_head else 1)
        self.out_gn_g = ones_param((base,), dtype)
        self.out_gn_b = zeros_param((base,), dtype)
        self.conv_out = Conv(base, out_ch, 3, rng, dtype, zero=True)

    # timestep embedding -----------------------------------------------------
    def time_embed(self, t, schedule: NoiseSchedule) -> Tensor:
        """Sinusoid ladder for t in [1, T] through a two-layer MLP."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
            raise TimestepError(f"t={t} outside [1, {schedule.timesteps}]")
        feats = Tensor(sinusoid_features(t_arr, self.cfg.time_width, self.dtype))
        h = T.silu(T.matmul(feats, self.time_w1) + self.time_b1)
        return T.matmul(h, self.time_w2) + self.time_b2

    def _forward(self, x: Tensor, temb: Tensor, cond: Tensor):
        h = self.conv_in(x)
        skips = []
        for i, res_list in enumerate(self.down_res):
            for r, res in enumerate(res_list):
                h = res(h, temb)
                attn = self.down_attn[i][r]
                if attn:
                    h = attn(h, cond)
                skips.append(h)
            if self.downs[i]:
                h = self.downs[i](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, cond)
        h = self.mid_res2(h, temb)

        for j, res_list in enumerate(self.up_res):
            for r, res in enumerate(res_list):
                h = res(T.concat([h, skips.pop()], axis=1), temb)
                attn = self.up_attn[j][r]
                if attn:
                    h = attn(h, cond)
            if self.ups[j]:
                h = self.ups[j](T.upsample2x(h))

        h = T.silu(group_norm(h, self.out_gn_g, self.out_gn_b, self.cfg.groups))
        return self.conv_out(h)

    def __call__(self, x_t, t, cond_tokens, schedule: NoiseSchedule):
        """Returns (eps_hat, var_coeff or None); accepts single or batched input."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
        cond = cond_tokens if isinstance(cond_tokens, Tensor) else Tensor(np.asarray(cond_tokens))
        if cond.shape[-1] != self.cfg.cond_width:
            raise ShapeError(
                f"conditioning width {cond.shape[-1]} != configured {self.cfg.cond_width}"
            )
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1, *x.shape))
        if cond.ndim == 2:
            cond = T.reshape(cond, (1, *cond.shape))
        s = self.cfg.image_size
        if x.shape[1:] != (self.cfg.channels, s, s):
            raise ShapeError(f"input shape {x.shape} does not match configured {s}x{s}")
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            t_arr = np.full(x.shape[0], int(t_arr))
        temb = self.time_embed(t_arr, schedule)
        out = self._forward(x, temb, cond)
        if self.cfg.variance_head:
            c = self.cfg.channels
            eps, v_raw = out[:, :c], out[:, c:]
            v = T.sigmoid(v_raw)
        else:
            eps, v = out, None
        if single:
            eps = eps[0]
            v = v[0] if v is not None else None
        return eps, v

    def predict_eps(self, x_t, t, cond_tokens, schedule: NoiseSchedule) -> Tensor:
        return self(x_t, t, cond_tokens, schedule)[0]

    # parameters ---------------------------------------------------------------
    def params(self) -> dict:
        out = {
            "time_w1": self.time_w1,
            "time_b1": self.time_b1,
            "time_w2": self.time_w2,
            "time_b2": self.time_b2,
            "out_gn_g": self.out_gn_g,
            "out_gn_b": self.out_gn_b,
        }
        out.update(self.conv_in.params("conv_in"))
        out.update(self.conv_out.params("conv_out"))
        for i, res_list in enumerate(self.down_res):
            for r, res in enumerate(res_list):
                out.update(res.params(f"down{i}.res{r}"))
                if self.down_attn[i][r]:
                    out.update(self.down_attn[i][r].params(f"down{i}.attn{r}"))
            if self.downs[i]:
                out.update(self.downs[i].params(f"down{i}.pool"))
        out.update(self.mid_res1.params("mid.res1"))
        out.update(self.mid_attn.params("mid.attn"))
        out.update(self.mid_res2.params("mid.res2"))
        for j, res_list in enumerate(self.up_res):
            for r, res in enumerate(res_list):
                out.update(res.params(f"up{j}.res{r}"))
                if self.up_attn[j][r]:
                    out.update(self.up_attn[j][r].params(f"up{j}.attn{r}"))
            if self.ups[j]:
                out.update(self.ups[j].params(f"up{j}.grow"))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())
