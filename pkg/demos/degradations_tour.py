"""
Simulating thermal degradations
===============================

Blur, block-mean downsampling and sensor noise on a synthetic scene, with a
numerical check that every operator's adjoint is consistent.
"""

import numpy as np

from tdiff.degradations import NoiseModel, degrade, make_operator
from tdiff.metrics import psnr
from tdiff.image import to_unit
from tdiff.scenes import SyntheticSceneSpec, generate_scene

x = generate_scene(SyntheticSceneSpec(extent=(64, 64), seed=3))
print("scene range: [%.3f, %.3f]" % (x.min(), x.max()))

# Each operator maps a 64x64 image to its measurement grid.
for kind in ("identity", "blur", "box", "blur+box"):
    op = make_operator(kind, x.shape, factor=2)
    u = np.random.default_rng(0).standard_normal(op.in_shape)
    v = np.random.default_rng(1).standard_normal(op.out_shape)
    gap = abs(np.vdot(op.forward(u), v) - np.vdot(u, op.adjoint(v)))
    print(f"{kind:9s} {op.in_shape} -> {op.out_shape}  adjoint gap {gap:.1e}")

# Column stripes are drawn once from fpn_seed, so two frames share them
# while their white noise differs.
noise = NoiseModel(gaussian_sigma=0.05, fpn_column_sigma=0.08, fpn_seed=7)
op = make_operator("identity", x.shape)
y1 = degrade(x, op, noise, rng=1)
y2 = degrade(x, op, noise, rng=2)
stripes = (y1 - x).mean(axis=0)
print("column offset correlation between frames:",
      round(np.corrcoef(stripes, (y2 - x).mean(axis=0))[0, 1], 3))
print("PSNR of a noisy frame: %.2f dB" % psnr(to_unit(np.clip(y1, -1, 1)), to_unit(x)))

# Averaging many frames removes the white noise but not the stripes.
avg = np.mean([degrade(x, op, noise, rng=k) for k in range(64)], axis=0)
print("after 64-frame averaging:     %.2f dB" % psnr(to_unit(np.clip(avg, -1, 1)), to_unit(x)))
