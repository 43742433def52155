"""
Back-projection versus least-squares guidance
=============================================

For a 2x block-mean downsampling the Gram matrix ``A A^T`` is a scaled
identity, so one back-projection step with unit step size lands exactly on
the set of images consistent with the measurement. The least-squares step
moves in the same direction but its length depends on the scale ``c``.
"""

import numpy as np

from tdiff.degradations import BoxDownsample
from tdiff.sampler import guidance_bp, guidance_ls, guided_update
from tdiff.scenes import SyntheticSceneSpec, generate_scene

x = generate_scene(SyntheticSceneSpec(extent=(32, 32), seed=8))
op = BoxDownsample(x.shape, 2)
y = op.forward(x)

# A poor estimate: the clean image plus a smooth bias.
guess = x + 0.3 * np.sin(np.linspace(0, 3, 32))[None, :]
print("initial residual |Ax - y| = %.4f" % np.linalg.norm(op.forward(guess) - y))

g_bp = guidance_bp(guess, y, op, eta_reg=0.0)
g_ls = guidance_ls(guess, y, op, scale_ls=1.0)
for delta in (0.0, 0.5, 1.0):
    out = guided_update(guess, g_bp, g_ls, mu_t=1.0, delta_t=delta)
    print("delta=%.1f  residual after one step %.2e" % (delta, np.linalg.norm(op.forward(out) - y)))

# g_LS = A^T r while g_BP = A^T (A A^T)^-1 r = 4 A^T r here, so c = 4 makes
# the two terms coincide.
print("max |g_BP - 4 g_LS| = %.1e" % np.abs(g_bp - guidance_ls(guess, y, op, 4.0)).max())
