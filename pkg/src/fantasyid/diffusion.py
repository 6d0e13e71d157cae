"""Noise schedules, forward corruption, the epsilon objective, condition dropout and
DDIM-style sampling with classifier-free guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .numerics import ContractError, Rng


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] == 1
    kind: str

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 1.5
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("sampler steps must be >= 1")
        if self.guidance < 0:
            raise ContractError("guidance scale must be >= 0")


@dataclass
class TrainBatch:
    z: torch.Tensor  # clean latents (B, F, H, W, C)
    text: torch.Tensor  # (B, n_txt) token ids
    v_f: torch.Tensor | None  # (B, N', C)
    t: torch.Tensor  # (B,) in [1, T]
    noise: torch.Tensor  # same shape as z
    null_mask: list[bool] = field(default_factory=list)


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                  beta_end: float = 0.02, cosine_s: float = 0.008) -> NoiseSchedule:
    """``linear``: betas evenly spaced in [beta_start, beta_end], alpha_bar = cumprod(1 - beta).
    ``cosine``: alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2), with per-step
    betas capped at 0.999."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        ab = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T + cosine_s) / (1 + cosine_s)) * math.pi / 2) ** 2
        raw = f / f[0]
        betas = np.minimum(1.0 - raw[1:] / raw[:-1], 0.999)
        ab = np.cumprod(1.0 - betas)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], ab])
    if not (np.diff(alpha_bar) < 0).all() or alpha_bar[-1] <= 0:
        raise ScheduleError("schedule is not strictly decreasing in (0, 1]")
    return NoiseSchedule(alpha_bar, kind)


def q_sample(z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z + sqrt(1 - ab_t) eps; ``t`` is an int or a (B,) tensor."""
    if eps.shape != z.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    t_arr = np.asarray(torch.as_tensor(t).cpu().numpy())
    if (t_arr < 0).any() or (t_arr > schedule.T).any():
        raise ScheduleError(f"timestep out of range [0, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bar[t_arr], dtype=z.dtype)
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (z.dim() - 1)))
    return torch.sqrt(ab) * z + torch.sqrt(1.0 - ab) * eps


def training_loss(batch: TrainBatch, denoiser: Callable, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between predicted and injected noise."""
    z_t = q_sample(batch.z, batch.t, batch.noise, schedule)
    pred = denoiser(z_t, batch.t, batch.text, batch.v_f)
    return ((pred - batch.noise) ** 2).mean()


def drop_condition(text: list[int], null: list[int], rng: Rng, p: float = 0.1) -> tuple[list[int], bool]:
    """Swap in the null sequence with probability ``p``; returns (tokens, dropped)."""
    dropped = rng.random() < p
    return (list(null) if dropped else list(text)), dropped


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    # s = 0 and s = 1 return the branch itself so those cases stay bit-exact
    if s == 0.0:
        return eps_uncond
    if s == 1.0:
        return eps_cond
    return eps_uncond + s * (eps_cond - eps_uncond)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Uniform stride ending at T: round((i + 1) * T / steps) for i < steps."""
    if not 1 <= steps <= T:
        raise ContractError(f"steps must lie in [1, {T}], got {steps}")
    return [int(round((i + 1) * T / steps)) for i in range(steps)]


def ddim_step(x: torch.Tensor, eps: torch.Tensor, ab_t: float, ab_prev: float, eta: float,
              noise: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    """One update from t to the previous stride point; returns (x_prev, x0_pred)."""
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
    x_prev = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0 and noise is not None:
        x_prev = x_prev + sigma * noise
    return x_prev, x0


@torch.no_grad()
def sample(denoiser: Callable, shape: tuple[int, ...], text, v_f, schedule: NoiseSchedule,
           config: SamplerConfig, rng: Rng, null_text=None, x_init: torch.Tensor | None = None,
           dtype: torch.dtype = torch.float32, trace: list | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM-style reverse pass over ``config.steps`` strided steps.

    With ``guidance != 1`` and ``null_text`` given, each step combines conditional and
    null-text predictions; the id descriptor is kept in both branches.
    """
    if config.steps > schedule.T:
        raise ContractError(f"{config.steps} steps exceed schedule length {schedule.T}")
    ts = strided_timesteps(schedule.T, config.steps)
    x = rng.normal(shape, dtype) if x_init is None else x_init.clone()
    b = shape[0]
    use_cfg = null_text is not None and config.guidance != 1.0
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        tt = torch.full((b,), t, dtype=torch.long)
        eps = denoiser(x, tt, text, v_f)
        if use_cfg:
            eps_u = denoiser(x, tt, null_text, v_f)
            eps = cfg_combine(eps, eps_u, config.guidance)
        noise = rng.normal(shape, dtype) if config.eta > 0 and t_prev > 0 else None
        x, x0 = ddim_step(x, eps, float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t_prev]),
                          config.eta, noise)
        if trace is not None:
            trace.append((t_prev, x.clone()))
    return x
