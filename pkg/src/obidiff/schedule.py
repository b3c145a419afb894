"""Diffusion timestep schedule and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with derived alpha tables, indexed t = 1..T."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def _check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 10:
        raise ValueError(f"T must be >= 10, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        T=T,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    `t` may be a scalar or a per-item tensor of shape (batch,) for batched
    x0 of shape (batch, ...).
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {x0.shape} vs {eps.shape}")
    t_arr = np.asarray(t)
    sched._check_t(t_arr)
    abar = torch.as_tensor(
        sched.alpha_bars[t_arr - 1], dtype=x0.dtype, device=x0.device
    )
    if abar.ndim == 1:  # broadcast per-item coefficients over spatial dims
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
