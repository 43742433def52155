"""Noise schedule, forward noising and DDIM reverse steps.

Timesteps are 0-based: ``t = 0`` is the least noisy step and
``alpha_bar[t] = prod_{s <= t} (1 - beta[s])``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import make_rng


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return t


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule including both endpoints."""
    if T < 2:
        raise ValueError("need at least two timesteps")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("require 0 < beta_start < beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return DiffusionSchedule(beta, alpha, alpha_bar)


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t, eps_hat, t: int, sched: DiffusionSchedule):
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def eps_from_x0(x_t, x0, t: int, sched: DiffusionSchedule):
    """The noise that would turn ``x0`` into ``x_t`` at step ``t``."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return (np.asarray(x_t) - np.sqrt(ab) * np.asarray(x0)) / np.sqrt(1.0 - ab)


def ddim_sigma(t: int, t_prev: int, eta_ddim: float, sched: DiffusionSchedule) -> float:
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    return float(eta_ddim * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev))


def ddim_step(x_t, x0_hat, eps_hat, t: int, eta_ddim: float, rng, sched: DiffusionSchedule,
              t_prev: int | None = None):
    """Move from step ``t`` to ``t_prev`` (default ``t - 1``).

    ``x_prev = sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps + sigma z``.
    No random numbers are drawn when ``eta_ddim == 0``.
    """
    t = sched.check_t(t)
    if t == 0:
        raise ValueError("no step precedes t = 0")
    if not 0.0 <= eta_ddim <= 1.0:
        raise ValueError("eta_ddim must lie in [0, 1]")
    t_prev = t - 1 if t_prev is None else sched.check_t(t_prev)
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    ab_prev = sched.alpha_bar[t_prev]
    sigma = ddim_sigma(t, t_prev, eta_ddim, sched)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * make_rng(rng).standard_normal(np.shape(x_t))
    return out


def strided_timesteps(T: int, n_steps: int, start: int | None = None) -> np.ndarray:
    """Descending sub-sequence of ``n_steps`` timesteps from ``start`` down to 0."""
    start = T - 1 if start is None else int(start)
    if not 0 <= start < T:
        raise ValueError("start step out of range")
    n_steps = max(1, min(int(n_steps), start + 1))
    seq = np.unique(np.rint(np.linspace(0, start, n_steps)).astype(int))
    return seq[::-1]
