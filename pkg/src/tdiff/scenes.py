"""Synthetic thermal scenes used in place of a real camera corpus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import make_rng


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Background gradient, low-frequency texture and soft-edged warm blobs.

    Values are in the normalized [-1, 1] domain. ``blob_temperature_range`` is
    the blob contrast above ``background_level``, ``edge_sharpness`` the
    logistic slope of blob borders per pixel, and ``texture_amplitude`` the
    total amplitude of three random plane waves (wavelengths 12-32 px).
    """

    extent: tuple[int, int] = (64, 64)
    blob_count: int = 3
    blob_temperature_range: tuple[float, float] = (0.6, 1.2)
    blob_radius_range: tuple[float, float] = (6.0, 14.0)
    background_gradient: float = 0.4
    background_level: float = -0.35
    texture_amplitude: float = 0.2
    edge_sharpness: float = 1.0
    seed: int = 0


def generate_scene(spec: SyntheticSceneSpec) -> np.ndarray:
    rng = make_rng(spec.seed)
    h, w = spec.extent
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx / max(w - 1, 1) - 0.5) + np.sin(angle) * (yy / max(h - 1, 1) - 0.5)
    img = spec.background_level + spec.background_gradient * ramp
    for _ in range(3):
        k = rng.uniform(2 * np.pi / 32, 2 * np.pi / 12)
        theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        wave = np.sin(k * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img = img + spec.texture_amplitude / np.sqrt(3) * wave
    lo_t, hi_t = spec.blob_temperature_range
    lo_r, hi_r = spec.blob_radius_range
    for _ in range(spec.blob_count):
        # centres stay off the outer 20% so blob borders land inside the frame
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        ry = rng.uniform(lo_r, hi_r)
        rx = ry * rng.uniform(0.6, 1.4)
        theta = rng.uniform(0, np.pi)
        temp = rng.uniform(lo_t, hi_t)
        dy, dx = yy - cy, xx - cx
        u = (np.cos(theta) * dx + np.sin(theta) * dy) / rx
        v = (-np.sin(theta) * dx + np.cos(theta) * dy) / ry
        dist = (np.sqrt(u * u + v * v) - 1.0) * min(rx, ry)
        mask = 0.5 * (1.0 - np.tanh(0.5 * spec.edge_sharpness * dist))
        img = np.maximum(img, img * (1 - mask) + (spec.background_level + temp) * mask)
    return np.clip(img, -1.0, 1.0)


def make_corpus(n: int, seed: int, **kw) -> list[np.ndarray]:
    """``n`` scenes with per-scene seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_scene(SyntheticSceneSpec(seed=int(s), **kw)) for s in seeds]
