"""Properties of the desk-trained network shared with the acceptance suite."""

import numpy as np
import pytest
import torch

from tdiff.denoiser import predict_noise

pytestmark = pytest.mark.slow


def test_timestep_embedding_distinguishes_steps(desk_net):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 16, 16))
    early = predict_noise(desk_net, x, 1)
    late = predict_noise(desk_net, x, 999)
    assert np.abs(early.mean() - late.mean()) > 1e-3
    assert np.abs(early - late).mean() > 0.05


def test_loss_moving_average_trends_down(desk_run):
    # The diffusion loss redraws t and eps every step, so a 100-step moving
    # average still wobbles by a few percent on a plateau. We check that it
    # falls between successive 500-step checkpoints of the first 2000 steps
    # and that the 100-step block means are strongly rank-anticorrelated with step.
    log = np.loadtxt(desk_run["root"] / "runs" / "loss.log")
    steps, loss = log[:, 0], log[:, 1]
    assert np.array_equal(steps[:2000], np.arange(1, 2001))
    ma = np.convolve(loss[:2000], np.ones(100) / 100, mode="valid")
    checkpoints = ma[[0, 400, 900, 1400, 1900]]
    assert np.all(np.diff(checkpoints) < 0), checkpoints
    blocks = loss[:2000].reshape(20, 100).mean(axis=1)
    rank = np.argsort(np.argsort(blocks))
    rho = np.corrcoef(rank, np.arange(20))[0, 1]
    assert rho < -0.8, rho


def test_trained_net_beats_zero_predictor(desk_net):
    from tdiff.diffusion import make_schedule, q_sample
    from tdiff.scenes import make_corpus

    sched = make_schedule()
    rng = np.random.default_rng(9)
    imgs = make_corpus(4, 4242)
    x0 = np.stack([img[r:r + 16, c:c + 16] for img in imgs for r, c in ((8, 8), (24, 30), (40, 16))])
    errs, base = [], []
    for t in (50, 300, 700):
        eps = rng.standard_normal(x0.shape)
        xt = q_sample(x0, t, eps, sched)
        with torch.no_grad():
            pred = predict_noise(desk_net, xt, t)
        errs.append(np.mean((pred - eps) ** 2))
        base.append(np.mean(eps**2))
    assert np.mean(errs) < 0.5 * np.mean(base)
