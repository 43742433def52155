"""Measurement-guided patch diffusion sampler.

At each timestep the current state is tiled, every patch is denoised
independently, the clean-image estimates are blended with the grid window,
and the blended estimate is pulled towards the measurement with a mix of the
back-projection and least-squares corrections before the DDIM step.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .degradations import LinearOperator
from .denoiser import DivergenceError, predict_noise, torch_threads
from .diffusion import DiffusionSchedule, ddim_step, eps_from_x0, predict_x0, strided_timesteps
from .image import make_rng
from .patches import PatchGrid, aggregate, split

log = logging.getLogger(__name__)

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class GuidanceConfig:
    """Guidance and sampling knobs.

    The step size defaults to ``mu_t = gamma / T`` and the BP/LS blend to
    ``delta_t = zeta``; explicit per-timestep arrays (indexed by ``t``, length
    ``T``) override both.
    """

    eta_reg: float = 0.0
    scale_ls: float = 0.9
    gamma: float = 80.0
    eta_ddim: float = 0.7
    zeta: float = 0.9
    mu_schedule: np.ndarray | None = None
    delta_schedule: np.ndarray | None = None
    steps: int = 100
    start_step: int | None = None
    order: str = "x0"  # "x0": correct the blended estimate; "xt": correct after re-noising
    eps_source: str = "recompute"  # DDIM direction from the corrected estimate or the network

    def __post_init__(self):
        if self.eta_reg < 0:
            raise ValueError("eta_reg must be >= 0")
        if not 0.0 <= self.eta_ddim <= 1.0:
            raise ValueError("eta_ddim must lie in [0, 1]")
        if self.delta_schedule is not None:
            d = np.asarray(self.delta_schedule, dtype=np.float64)
            if np.any(d < 0) or np.any(d > 1):
                raise ValueError("delta_t must lie in [0, 1]")
            self.delta_schedule = d
        elif not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        if self.mu_schedule is not None:
            m = np.asarray(self.mu_schedule, dtype=np.float64)
            if np.any(m < 0):
                raise ValueError("mu_t must be >= 0")
            self.mu_schedule = m
        elif self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.order not in ("x0", "xt"):
            raise ValueError("order must be 'x0' or 'xt'")
        if self.eps_source not in ("recompute", "network"):
            raise ValueError("eps_source must be 'recompute' or 'network'")

    def mu(self, t: int, T: int) -> float:
        if self.mu_schedule is not None:
            return float(self.mu_schedule[t])
        return self.gamma / T

    def delta(self, t: int) -> float:
        if self.delta_schedule is not None:
            return float(self.delta_schedule[t])
        return self.zeta


def guidance_bp(x0_hat, y, op: LinearOperator, eta_reg: float = 0.0):
    """``A^T (A A^T + eta I)^{-1} (A x - y)``."""
    return op.back_project(op.forward(x0_hat) - y, eta_reg)


def guidance_ls(x0_hat, y, op: LinearOperator, scale_ls: float = 1.0):
    """``c A^T (A x - y)``."""
    return scale_ls * op.adjoint(op.forward(x0_hat) - y)


def guided_update(x_hat, g_bp, g_ls, mu_t: float, delta_t: float):
    return x_hat - mu_t * ((1.0 - delta_t) * g_bp + delta_t * g_ls)


def _correct(x, y, op, gcfg: GuidanceConfig, t: int, T: int):
    mu, delta = gcfg.mu(t, T), gcfg.delta(t)
    if mu == 0.0:
        return x, 0.0, 0.0
    g_bp = guidance_bp(x, y, op, gcfg.eta_reg) if delta < 1.0 else np.zeros_like(x)
    g_ls = guidance_ls(x, y, op, gcfg.scale_ls) if delta > 0.0 else np.zeros_like(x)
    return guided_update(x, g_bp, g_ls, mu, delta), float(np.linalg.norm(g_bp)), float(np.linalg.norm(g_ls))


def as_eps_fn(net) -> EpsFn:
    """Wrap a torch module as ``f(patches, t) -> eps``; callables pass through."""
    if isinstance(net, torch.nn.Module):
        net.eval()
        return lambda patches, t: predict_noise(net, patches, t)
    return net


def denoise_patches(eps_fn: EpsFn, patches: np.ndarray, t: int, threads: int = 1,
                    chunk: int = 64) -> np.ndarray:
    """Evaluate ``eps_fn`` on fixed-size chunks, optionally on a thread pool.

    Chunk boundaries do not depend on ``threads``, so results are identical
    for any thread count.
    """
    chunks = [patches[i:i + chunk] for i in range(0, len(patches), chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: eps_fn(c, t), chunks))
    else:
        parts = [eps_fn(c, t) for c in chunks]
    return np.concatenate(parts, axis=0)


def restore(y, op: LinearOperator, net, sched: DiffusionSchedule, grid: PatchGrid,
            gcfg: GuidanceConfig | None = None, rng=0, threads: int = 1, chunk: int = 64,
            callback: Callable | None = None) -> np.ndarray:
    """Restore an image of ``op.in_shape`` from the measurement ``y``.

    ``net`` is a :class:`~tdiff.denoiser.UNet` or any ``f(patches, t)``
    returning predicted noise for a ``(n, ps, ps)`` stack. ``callback`` is
    called as ``callback(step_index, t, x_t, x0_estimate)`` after each step.
    The result is clipped to [-1, 1]. Do not seed ``rng`` from the same
    stream that produced the measurement noise: the initial noise would then
    repeat it.
    """
    gcfg = gcfg or GuidanceConfig()
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.out_shape:
        raise ValueError(f"measurement shape {y.shape} does not match operator output {op.out_shape}")
    if grid.extent != op.in_shape:
        raise ValueError(f"grid extent {grid.extent} does not match operator input {op.in_shape}")
    if isinstance(net, torch.nn.Module) and net.config.patch_size != grid.ps:
        raise ValueError(f"net patch size {net.config.patch_size} != grid patch size {grid.ps}")
    rng = make_rng(rng)
    eps_fn = as_eps_fn(net)
    T = sched.T
    seq = strided_timesteps(T, gcfg.steps, gcfg.start_step)
    ab = sched.alpha_bar

    x_init = op.pseudo_inverse(y, gcfg.eta_reg)
    t0 = int(seq[0])
    x = math.sqrt(ab[t0]) * x_init + math.sqrt(1.0 - ab[t0]) * rng.standard_normal(op.in_shape)

    with torch_threads(1 if isinstance(net, torch.nn.Module) else None):
        for i, t in enumerate(seq):
            t = int(t)
            patches = split(x, grid)
            eps_p = denoise_patches(eps_fn, patches, t, threads, chunk)
            x0_hat = aggregate(predict_x0(patches, eps_p, t, sched), grid)
            if gcfg.order == "x0":
                x0_hat, n_bp, n_ls = _correct(x0_hat, y, op, gcfg, t, T)
                log.debug("t=%d |g_bp|=%.4g |g_ls|=%.4g", t, n_bp, n_ls)
            if not np.all(np.isfinite(x0_hat)):
                raise DivergenceError(f"non-finite estimate at timestep {t}")
            if i == len(seq) - 1:
                if gcfg.order == "xt":
                    # the clean end of the trajectory: the target is y itself
                    x0_hat, _, _ = _correct(x0_hat, y, op, gcfg, t, T)
                x = x0_hat
            else:
                t_prev = int(seq[i + 1])
                if gcfg.eps_source == "recompute":
                    eps_hat = eps_from_x0(x, x0_hat, t, sched)
                else:
                    eps_hat = aggregate(eps_p, grid)
                x = ddim_step(x, x0_hat, eps_hat, t, gcfg.eta_ddim, rng, sched, t_prev=t_prev)
                if gcfg.order == "xt":
                    y_t = math.sqrt(ab[t_prev]) * y
                    x, n_bp, n_ls = _correct(x, y_t, op, gcfg, t_prev, T)
                    log.debug("t=%d |g_bp|=%.4g |g_ls|=%.4g", t_prev, n_bp, n_ls)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite state at timestep {t}")
            if callback is not None:
                callback(i, t, x, x0_hat)
    return np.clip(x, -1.0, 1.0)
