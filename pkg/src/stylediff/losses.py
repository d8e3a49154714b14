"""Training objectives: noise MSE, variational term, and perceptual distance.

The perceptual distance runs both images through a frozen randomly-initialized
conv pyramid (five conv+tanh+downsample stages) and averages the stage-wise L2
feature distances, each normalized by its element count. The same pyramid
serves the evaluation metrics, so train-time and eval-time feature spaces
coincide within a run.

The variational term is a hybrid: for t > 1 the KL between the true Gaussian
posterior and the model's reverse step (mean gradient-stopped by default, so
only a learned variance head receives gradient through it); at t = 1 the
discretized negative log-likelihood of the clean image over 1/255-half-width
pixel bins. Reported in nats per element. With a fixed variance the t = 1
variance falls back to the clipped posterior table (the exact posterior
variance at t = 1 is zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, TimestepError
from .rng import make_rng
from .schedule import (
    NoiseSchedule,
    posterior_mean_from_eps,
    posterior_mean_from_x0,
    predict_x0,
)
from .tensor import Tensor

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class LossWeights:
    lambda_simple: float = 1.0
    lambda_perceptual: float = 0.001

    def __post_init__(self):
        if self.lambda_simple < 0 or self.lambda_perceptual < 0:
            raise ValueError("loss weights must be nonnegative")


class FeatureExtractor:
    """Frozen seeded conv pyramid; deterministic given (seed, channels)."""

    STAGES = (8, 16, 24, 32, 32)

    def __init__(self, seed: int = 0, in_channels: int = 3, stages=None, dtype=np.float32):
        self.seed = seed
        self.stages = tuple(stages) if stages is not None else self.STAGES
        self.weights = []
        c_prev = in_channels
        for m, c_out in enumerate(self.stages):
            rng = make_rng(seed, "extractor", m)
            fan = c_prev * 9
            w = (rng.standard_normal((c_out, c_prev, 3, 3)) * np.sqrt(2.0 / fan)).astype(dtype)
            self.weights.append(Tensor(w))  # frozen: requires_grad stays False
            c_prev = c_out

    @property
    def feature_dim(self) -> int:
        return self.stages[-1]

    def features(self, x) -> list:
        """Per-stage feature maps; gradients flow to the input, not the weights."""
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        single = h.ndim == 3
        if single:
            h = T.reshape(h, (1, *h.shape))
        outs = []
        for w in self.weights:
            h = T.tanh(T.conv2d(h, w, stride=1, padding=1))
            if h.shape[-1] % 2 == 0:
                h = T.avg_pool2d(h, 2)
            outs.append(h[0] if single else h)
        return outs

    def pooled(self, x) -> np.ndarray:
        """Global-average-pooled final stage: one feature_dim vector per image."""
        with T.no_grad():
            last = self.features(x)[-1]
        data = last.data
        if data.ndim == 3:
            return data.mean(axis=(1, 2))
        return data.mean(axis=(2, 3))


def l_simple(eps_true, eps_hat) -> Tensor:
    """Mean squared error over all elements."""
    eps_true = eps_true if isinstance(eps_true, Tensor) else Tensor(np.asarray(eps_true))
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(np.asarray(eps_hat))
    if eps_true.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch {eps_true.shape} vs {eps_hat.shape}")
    diff = eps_hat - eps_true
    return T.mean(diff * diff)


def kl_gaussian_nats(mu1, logvar1, mu2, logvar2):
    """Elementwise KL(N(mu1, e^logvar1) || N(mu2, e^logvar2)) in nats."""
    var1 = T.exp(logvar1) if isinstance(logvar1, Tensor) else np.exp(logvar1)
    diff = mu2 - mu1
    return 0.5 * (logvar2 - logvar1 - 1.0) + (var1 + diff * diff) * T.exp(-logvar2) * 0.5


def gaussian_cdf(z):
    return (T.erf(z * (1.0 / _SQRT2)) + 1.0) * 0.5


def discretized_gaussian_nll(x0, mean, log_sigma2) -> Tensor:
    """-log P(pixel bin) under N(mean, sigma^2); bins are x0 +- 1/255, open at +-1."""
    inv_sigma = T.exp(log_sigma2 * -0.5)
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    plus = (mean * -1.0 + Tensor(x0d + 1.0 / 255.0)) * inv_sigma
    minus = (mean * -1.0 + Tensor(x0d - 1.0 / 255.0)) * inv_sigma
    cdf_plus = gaussian_cdf(plus)
    cdf_minus = gaussian_cdf(minus)
    lower_tail = np.asarray(x0d <= -0.999, dtype=cdf_plus.dtype)
    upper_tail = np.asarray(x0d >= 0.999, dtype=cdf_plus.dtype)
    interior = 1.0 - lower_tail - upper_tail
    prob = (
        cdf_plus * Tensor(lower_tail)
        + (1.0 - cdf_minus) * Tensor(upper_tail)
        + (cdf_plus - cdf_minus) * Tensor(interior)
    )
    return -T.log(T.clip(prob, 1e-12, 1.0))


def _model_log_variance(t_arr, var_coeff, schedule: NoiseSchedule, like: Tensor):
    log_beta = np.log(schedule.beta(t_arr)).astype(like.dtype)
    log_post = schedule.log_posterior_variance(t_arr).astype(like.dtype)
    shape = log_beta.shape + (1,) * (like.ndim - log_beta.ndim)
    log_beta = log_beta.reshape(shape)
    log_post = log_post.reshape(shape)
    if var_coeff is None:
        return Tensor(np.broadcast_to(log_post, like.shape).copy())
    return var_coeff * Tensor(log_beta) + (var_coeff * -1.0 + 1.0) * Tensor(log_post)


def l_vlb(x0, x_t, t, eps_hat, var_coeff, schedule: NoiseSchedule, stop_mean_grad: bool = True) -> Tensor:
    """Variational term in nats per element; KL for t > 1, pixel-bin NLL at t = 1."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0))
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(np.asarray(eps_hat))
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise TimestepError(f"t={t} outside [1, {schedule.timesteps}]")

    mean_model = posterior_mean_from_eps(x_t, t, eps_hat, schedule)
    if stop_mean_grad:
        mean_model = T.stop_gradient(mean_model)
    log_var_model = _model_log_variance(t_arr, var_coeff, schedule, mean_model)

    mean_true = posterior_mean_from_x0(x_t, t, x0, schedule).data
    # exact posterior variance; the t=1 entry (exactly zero) uses the clipped
    # table so the masked-out KL branch stays finite
    var_true = np.where(
        t_arr > 1,
        schedule.posterior_variance(t_arr),
        np.exp(schedule.log_posterior_variance(t_arr)),
    ).astype(mean_model.dtype)
    shape = var_true.shape + (1,) * (mean_model.ndim - var_true.ndim)
    log_var_true = np.log(var_true).reshape(shape)

    kl = kl_gaussian_nats(Tensor(mean_true), Tensor(log_var_true), mean_model, log_var_model)
    nll = discretized_gaussian_nll(x0, mean_model, log_var_model)

    is_t1 = (t_arr == 1).astype(mean_model.dtype).reshape(
        t_arr.shape + (1,) * (mean_model.ndim - t_arr.ndim)
    )
    per_element = nll * Tensor(np.broadcast_to(is_t1, nll.shape).copy()) + kl * Tensor(
        np.broadcast_to(1.0 - is_t1, kl.shape).copy()
    )
    return T.mean(per_element)


def l_perceptual(x0_hat, x0, extractor: FeatureExtractor) -> Tensor:
    """Mean over stages of per-example feature L2 norms / stage element count."""
    a = x0_hat if isinstance(x0_hat, Tensor) else Tensor(np.asarray(x0_hat))
    b = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0))
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    single = a.ndim == 3
    feats_a = extractor.features(a)
    feats_b = extractor.features(b)
    total = None
    for fa, fb in zip(feats_a, feats_b):
        diff = fa - fb
        axes = tuple(range(diff.ndim)) if single else tuple(range(1, diff.ndim))
        numel = int(np.prod([diff.shape[ax] for ax in axes]))
        norm = T.sqrt(T.sum_(diff * diff, axis=axes) + 1e-16)
        term = T.mean(norm) * (1.0 / numel)
        total = term if total is None else total + term
    return total * (1.0 / len(feats_a))


def total_loss(
    x0,
    x_t,
    t,
    eps_true,
    eps_hat,
    var_coeff,
    extractor: FeatureExtractor,
    weights: LossWeights,
    schedule: NoiseSchedule,
    stop_mean_grad: bool = True,
):
    """Weighted sum of the three objectives; returns (total, per-term values)."""
    ls = l_simple(eps_true, eps_hat)
    lv = l_vlb(x0, x_t, t, eps_hat, var_coeff, schedule, stop_mean_grad=stop_mean_grad)
    x0_hat = predict_x0(x_t, t, eps_hat, schedule)
    lp = l_perceptual(x0_hat, x0, extractor)
    total = ls * weights.lambda_simple + lv + lp * weights.lambda_perceptual
    breakdown = {
        "l_simple": ls.item(),
        "l_vlb": lv.item(),
        "l_perc": lp.item(),
        "total": total.item(),
    }
    return total, breakdown
