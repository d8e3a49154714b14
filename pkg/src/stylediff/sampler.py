"""Reverse-process generation: ancestral steps and deterministic DDIM.

Sampling runs on plain numpy arrays (no gradient graph). DDIM walks an evenly
spaced subsequence of timesteps that always contains T and 1, finishing with a
jump to t = 0; with eta = 0 the whole trajectory is a pure function of the
starting noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TimestepError
from .guidance import ConditionPair, GuidanceWeights, guided_eps
from .schedule import NoiseSchedule, posterior_mean_from_eps, predict_x0
from .tensor import no_grad


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"  # ddpm | ddim
    steps: int = 50  # ddim subsample length; ddpm always walks all T
    eta: float = 0.0
    clamp_x0: bool = True

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler kind must be ddpm or ddim, got {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")


def _np(x) -> np.ndarray:
    from .tensor import Tensor

    return x.data if isinstance(x, Tensor) else np.asarray(x)


def ddpm_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, rng, var_coeff=None) -> np.ndarray:
    """One ancestral step; deterministic (no injected noise) at t = 1."""
    if not 1 <= t <= schedule.timesteps:
        raise TimestepError(f"t={t} outside [1, {schedule.timesteps}]")
    x_t, eps_hat = _np(x_t), _np(eps_hat)
    with no_grad():
        mean = posterior_mean_from_eps(x_t, t, eps_hat, schedule).data
    if t == 1:
        return mean
    if var_coeff is None:
        var = schedule.posterior_variance(t)
    else:
        log_var = _np(var_coeff) * np.log(schedule.beta(t)) + (
            1.0 - _np(var_coeff)
        ) * schedule.log_posterior_variance(t)
        var = np.exp(log_var)
    z = rng.standard_normal(x_t.shape).astype(x_t.dtype)
    return mean + np.sqrt(var).astype(x_t.dtype) * z


def ddim_sigma(t: int, t_prev: int, schedule: NoiseSchedule, eta: float) -> float:
    abar_t = float(schedule.alpha_bar(t))
    abar_prev = float(schedule.alpha_bar(t_prev))
    return eta * np.sqrt((1 - abar_prev) / (1 - abar_t)) * np.sqrt(1 - abar_t / abar_prev)


def ddim_step(
    x_t,
    t: int,
    t_prev: int,
    eps_hat,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    rng=None,
    clamp: bool = False,
) -> np.ndarray:
    """Jump t -> t_prev (t_prev may be 0); fully deterministic when eta = 0."""
    if not 0 <= t_prev < t:
        raise TimestepError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x_t, eps_hat = _np(x_t), _np(eps_hat)
    with no_grad():
        x0_hat = predict_x0(x_t, t, eps_hat, schedule, clamp=clamp).data
    abar_prev = float(schedule.alpha_bar(t_prev))
    sigma = ddim_sigma(t, t_prev, schedule, eta)
    out = np.sqrt(abar_prev) * x0_hat + np.sqrt(max(1 - abar_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ConfigError("eta > 0 requires an rng for the stochastic term")
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out.astype(x_t.dtype)


def timestep_sequence(timesteps: int, steps: int) -> np.ndarray:
    """Evenly spaced descending subsequence of [1, T] including both ends."""
    if steps > timesteps:
        raise ConfigError(f"{steps} sampling steps exceed T={timesteps}")
    seq = np.unique(np.round(np.linspace(timesteps, 1, steps)).astype(int))[::-1]
    return seq


def generate(
    model,
    pair: ConditionPair,
    weights: GuidanceWeights,
    sampler_cfg: SamplerConfig,
    schedule: NoiseSchedule,
    rng,
    shape=(3, 16, 16),
) -> np.ndarray:
    """Full reverse chain from N(0, I); returns the x0 estimate.

    `model` is a callable (x_t, t, pair) -> eps evaluated through guided_eps,
    so each of the `steps` iterations costs up to three model calls.
    """
    x = rng.standard_normal(shape).astype(np.float32)
    if sampler_cfg.kind == "ddpm":
        for t in range(schedule.timesteps, 0, -1):
            eps = guided_eps(x, t, pair, weights, model)
            x = ddpm_step(x, t, eps, schedule, rng)
    else:
        seq = timestep_sequence(schedule.timesteps, sampler_cfg.steps)
        hops = list(zip(seq, np.append(seq[1:], 0)))
        for t, t_prev in hops:
            eps = guided_eps(x, int(t), pair, weights, model)
            x = ddim_step(
                x,
                int(t),
                int(t_prev),
                eps,
                schedule,
                eta=sampler_cfg.eta,
                rng=rng,
                clamp=sampler_cfg.clamp_x0,
            )
    if sampler_cfg.clamp_x0:
        x = np.clip(x, -1.0, 1.0)
    return x
