"""
Training the desk-scale denoiser
================================

Trains the 16x16 preset on 32 synthetic scenes and writes ``desk.ckpt``.
3000 steps take about four minutes on one CPU core; pass a smaller step
count as the first argument for a quick look.
"""

import sys
import time

import numpy as np

from tdiff.denoiser import (DenoiserConfig, TrainConfig, Trainer, build_unet,
                            sample_training_patches, save_checkpoint)
from tdiff.diffusion import make_schedule
from tdiff.scenes import make_corpus

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
out = sys.argv[2] if len(sys.argv) > 2 else "desk.ckpt"

images = make_corpus(32, seed=1)
config = DenoiserConfig.preset("desk")
net = build_unet(config, seed=3)
print("parameters:", sum(p.numel() for p in net.parameters()))

# lr is raised from the large-scale default; the desk threshold suits the
# narrower value range of synthetic scenes
tcfg = TrainConfig(learning_rate=1e-3, batch_size=64, variance_threshold=0.02)
trainer = Trainer(net, make_schedule(), tcfg, seed=4)
rng = np.random.default_rng(5)

losses = []
start = time.perf_counter()
for step in range(1, steps + 1):
    batch = sample_training_patches(images, config.patch_size, tcfg.variance_threshold, tcfg.batch_size, rng)
    losses.append(trainer.train_step(batch))
    if step % 250 == 0:
        print("step %5d  loss(avg 250) %.4f  %.0fs" % (step, np.mean(losses[-250:]), time.perf_counter() - start))

save_checkpoint(out, net, trainer)
print("saved", out)
