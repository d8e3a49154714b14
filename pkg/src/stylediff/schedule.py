"""Variance schedules and the closed-form forward diffusion process.

Timesteps are 1-based at this API (t in [1, T]); internal tables are 0-based,
so ``betas[t - 1]`` is the step-t variance. t = 0 is accepted wherever the
"no noise yet" convention is meaningful (alpha_bar(0) = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TimestepError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha tables plus derived posterior variances."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_variances: np.ndarray = field(init=False)
    log_posterior_variances: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.timesteps,):
            raise ConfigError(f"need {self.timesteps} betas, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
        post_var = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
        # beta~_1 is exactly 0; reuse beta~_2 so the log table stays finite
        clipped = post_var.copy()
        if self.timesteps > 1:
            clipped[0] = post_var[1]
        else:
            clipped[0] = betas[0]
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "posterior_variances", post_var)
        object.__setattr__(self, "log_posterior_variances", np.log(clipped))

    # 1-based accessors; t may be an int or an integer array ---------------
    def _check(self, t, lo: int):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.timesteps):
            raise TimestepError(f"t={t} outside [{lo}, {self.timesteps}]")
        return t

    def beta(self, t):
        return self.betas[self._check(t, 1) - 1]

    def alpha(self, t):
        return self.alphas[self._check(t, 1) - 1]

    def alpha_bar(self, t):
        t = self._check(t, 0)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])

    def posterior_variance(self, t):
        return self.posterior_variances[self._check(t, 1) - 1]

    def log_posterior_variance(self, t):
        return self.log_posterior_variances[self._check(t, 1) - 1]


def make_linear_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly interpolated from beta_start to beta_end inclusive."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    return NoiseSchedule(timesteps, betas)


def make_cosine_schedule(timesteps: int, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha-bar curve, beta capped at 0.999."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    steps = np.arange(timesteps + 1, dtype=np.float64)
    curve = np.cos((steps / timesteps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    alpha_bars = curve / curve[0]
    betas = np.clip(1.0 - alpha_bars[1:] / alpha_bars[:-1], 1e-8, 0.999)
    return NoiseSchedule(timesteps, betas)


def make_schedule(kind: str, timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(timesteps, beta_start, beta_end)
    if kind == "cosine":
        return make_cosine_schedule(timesteps)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _coeff(values, like: Tensor) -> np.ndarray:
    """Broadcast per-example scalars over trailing axes of `like`."""
    arr = np.asarray(values, dtype=like.dtype)
    if arr.ndim == 0:
        return arr
    return arr.reshape(arr.shape + (1,) * (like.ndim - arr.ndim))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def q_step(x_prev, t, schedule: NoiseSchedule, noise) -> Tensor:
    """One forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    x_prev, noise = _as_tensor(x_prev), _as_tensor(noise)
    if noise.shape != x_prev.shape:
        raise TimestepError(f"noise shape {noise.shape} != x shape {x_prev.shape}")
    beta = schedule.beta(t)
    a = _coeff(np.sqrt(1.0 - beta), x_prev)
    b = _coeff(np.sqrt(beta), x_prev)
    return x_prev * Tensor(a) + noise * Tensor(b)


def q_sample(x0, t, schedule: NoiseSchedule, noise) -> Tensor:
    """Jump to timestep t directly: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    x0, noise = _as_tensor(x0), _as_tensor(noise)
    if noise.shape != x0.shape:
        raise TimestepError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar(t)
    a = _coeff(np.sqrt(abar), x0)
    b = _coeff(np.sqrt(1.0 - abar), x0)
    return x0 * Tensor(a) + noise * Tensor(b)


def predict_x0(x_t, t, eps_hat, schedule: NoiseSchedule, clamp: bool = False) -> Tensor:
    """Invert q_sample around the predicted noise; optionally clip to [-1, 1]."""
    x_t, eps_hat = _as_tensor(x_t), _as_tensor(eps_hat)
    abar = schedule.alpha_bar(t)
    if np.any(abar == 0.0):
        raise ZeroDivisionError(f"alpha_bar({t}) is zero; x0 is unrecoverable")
    inv = _coeff(1.0 / np.sqrt(abar), x_t)
    scale = _coeff(np.sqrt(1.0 - abar), x_t)
    x0 = (x_t - eps_hat * Tensor(scale)) * Tensor(inv)
    if clamp:
        x0 = T.clip(x0, -1.0, 1.0)
    return x0


def posterior_mean_from_eps(x_t, t, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """Reverse-step mean: (x_t - (1 - alpha_t)/sqrt(1 - abar_t) eps) / sqrt(alpha_t)."""
    x_t, eps_hat = _as_tensor(x_t), _as_tensor(eps_hat)
    alpha = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    inv = _coeff(1.0 / np.sqrt(alpha), x_t)
    scale = _coeff((1.0 - alpha) / np.sqrt(1.0 - abar), x_t)
    return (x_t - eps_hat * Tensor(scale)) * Tensor(inv)


def posterior_mean_from_x0(x_t, t, x0, schedule: NoiseSchedule) -> Tensor:
    """True posterior mean of x_{t-1} given (x_t, x0), two-coefficient form."""
    x_t, x0 = _as_tensor(x_t), _as_tensor(x0)
    t_arr = schedule._check(t, 1)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_arr - 1)
    c0 = _coeff(np.sqrt(abar_prev) * beta / (1.0 - abar), x_t)
    ct = _coeff(np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar), x_t)
    return x0 * Tensor(c0) + x_t * Tensor(ct)
