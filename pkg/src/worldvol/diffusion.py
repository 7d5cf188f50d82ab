"""DDPM noise schedule, forward noising and ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is the clean state (alpha_bar = 1); steps run 1..T."""
    betas: torch.Tensor            # float64 [T + 1], betas[0] = 0
    alpha_bar: torch.Tensor        # float64 [T + 1]
    posterior_var: torch.Tensor    # float64 [T + 1]

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def make_schedule(T: int = 100, beta_1: float = 1e-3, beta_T: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule.

    The defaults are the classic 1000-step endpoints (1e-4, 0.02) scaled by
    1000 / T, which drives alpha_bar_T close to zero so sampling can start
    from N(0, I).
    """
    if T < 1 or not (0 < beta_1 <= beta_T < 1):
        raise ValueError(f"invalid schedule T={T}, beta range ({beta_1}, {beta_T})")
    betas = torch.linspace(beta_1, beta_T, T, dtype=torch.float64) if T > 1 else \
        torch.tensor([beta_1], dtype=torch.float64)
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = torch.as_tensor(betas, dtype=torch.float64)
    b = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
    abar = torch.cumprod(1 - b, 0)
    post = torch.zeros_like(b)
    post[1:] = (1 - abar[:-1]) / (1 - abar[1:]) * b[1:]
    return NoiseSchedule(b, abar, post)


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, tau, eps: torch.Tensor) -> torch.Tensor:
    """Closed-form forward noising; ``tau`` is an int or a [B] integer tensor."""
    tau_t = torch.as_tensor(tau)
    if (tau_t < 1).any() or (tau_t > schedule.T).any():
        raise ValueError(f"tau must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar[tau_t].to(z0.dtype)
    if ab.dim():
        ab = ab.reshape(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def p_mean(schedule: NoiseSchedule, z: torch.Tensor, tau: int, eps_hat: torch.Tensor,
           clip: tuple | None = None) -> torch.Tensor:
    """Reverse-step mean. With ``clip`` = (lo, hi) the implied clean sample is
    clamped to the data range first and the mean is the posterior mean given it;
    without clipping both forms are the same quantity."""
    b = schedule.betas[tau].item()
    ab = schedule.alpha_bar[tau].item()
    if clip is None:
        return (z - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(1 - b)
    ab_prev = schedule.alpha_bar[tau - 1].item()
    x0 = ((z - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)).clamp(*clip)
    return (math.sqrt(ab_prev) * b / (1 - ab)) * x0 + (math.sqrt(1 - b) * (1 - ab_prev) / (1 - ab)) * z


def sample(schedule: NoiseSchedule, predict: Callable[[torch.Tensor, int], torch.Tensor],
           shape, generator: torch.Generator, dtype=torch.float32,
           noise: Callable[[int], torch.Tensor] | None = None, trace: list | None = None,
           clip: tuple | None = None) -> torch.Tensor:
    """Ancestral sampling from z_T ~ N(0, I) down to z_0.

    ``predict(z, tau)`` returns the noise estimate. ``noise(tau)`` optionally
    supplies the Gaussian draws (initial state uses tau = T + 1) so callers can
    control per-frame streams; otherwise ``generator`` is used. ``clip`` bounds
    the implied clean sample at every step, for data with a known range.
    """
    draw = noise or (lambda _t: torch.randn(shape, generator=generator, dtype=dtype))
    z = draw(schedule.T + 1).to(dtype)
    for tau in range(schedule.T, 0, -1):
        if trace is not None:
            trace.append(tau)
        eps_hat = predict(z, tau)
        z = p_mean(schedule, z, tau, eps_hat, clip)
        if tau > 1:
            z = z + math.sqrt(schedule.posterior_var[tau].item()) * draw(tau).to(dtype)
    return z


def timestep_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = tau.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def epsilon_loss(model_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], schedule: NoiseSchedule,
                 z0: torch.Tensor, generator: torch.Generator, tau: torch.Tensor | None = None):
    """MSE between injected and predicted noise at uniformly drawn steps."""
    b = z0.shape[0]
    if tau is None:
        tau = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = q_sample(schedule, z0, tau, eps)
    return nn.functional.mse_loss(model_fn(zt, tau), eps)
