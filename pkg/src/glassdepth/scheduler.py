"""Diffusion schedule math: noise schedules, forward marginals, DDIM steps.

Functions here only use ``*``, ``+``, ``-`` and ``/`` on their array
arguments, so they accept numpy arrays and torch tensors alike.
Randomness is always supplied by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at ``t``; ``t == -1`` is the clean endpoint (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T - 1}]")
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.steps)

    def pairs(self):
        """Yield ``(t, t_prev)`` with ``t_prev = -1`` after the last step."""
        for i, t in enumerate(self.steps):
            yield t, (self.steps[i + 1] if i + 1 < len(self.steps) else -1)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars)


def _coef(schedule: NoiseSchedule, t, like):
    """sqrt(abar_t), sqrt(1 - abar_t) for scalar ``t`` or a per-sample batch of ``t``."""
    if np.ndim(t) == 0:
        ab = schedule.alpha_bar(int(t))
        return math.sqrt(ab), math.sqrt(1.0 - ab)
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 0 or t.max() >= schedule.T:
        raise IndexError(f"timesteps outside [0, {schedule.T - 1}]")
    ab = schedule.alpha_bars[t].reshape((-1,) + (1,) * (like.ndim - 1))
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if not isinstance(like, np.ndarray):
        import torch

        a = torch.as_tensor(a, dtype=like.dtype, device=like.device)
        b = torch.as_tensor(b, dtype=like.dtype, device=like.device)
    return a, b


def forward_sample(x0, t, noise, schedule: NoiseSchedule):
    """Draw from q(x_t | x_0) using caller-supplied standard normal ``noise``.

    ``t`` is an int, or a sequence with one timestep per leading-axis entry.
    """
    if tuple(x0.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    a, b = _coef(schedule, t, x0)
    return a * x0 + b * noise


def forward_step(x_prev, s: int, noise, schedule: NoiseSchedule):
    """Single Markov transition q(x_s | x_{s-1}); reference path for tests only."""
    beta = float(schedule.betas[s])
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def ddim_step(x_t, pred, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic DDIM update from ``t`` to ``t_prev`` given an x_0 estimate."""
    if tuple(x_t.shape) != tuple(pred.shape):
        raise ValueError("x_t and pred must have the same shape")
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    if t_prev == -1:
        return pred
    if ab_t >= 1.0:
        raise ZeroDivisionError(f"alpha_bar[{t}] == 1 leaves the implied noise undefined")
    eps = (x_t - math.sqrt(ab_t) * pred) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * pred + math.sqrt(1.0 - ab_prev) * eps


def make_timestep_plan(T: int, count: int) -> TimestepPlan:
    """Evenly spaced decreasing steps from T-1 down to 0 (integer arithmetic)."""
    if count < 1 or count > T:
        raise ValueError(f"count must lie in [1, {T}], got {count}")
    if count == 1:
        return TimestepPlan((0,))
    steps = tuple((T - 1) * (count - 1 - k) // (count - 1) for k in range(count))
    return TimestepPlan(steps)


def ddim_sample(x_T, denoise, plan: TimestepPlan, schedule: NoiseSchedule):
    """Run the reverse pass; ``denoise(x_t, t)`` returns an x_0 estimate."""
    x = x_T
    for t, t_prev in plan.pairs():
        x = ddim_step(x, denoise(x, t), t, t_prev, schedule)
    return x
