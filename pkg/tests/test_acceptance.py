"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N PASS/FAIL`` line and the same lines are
repeated in the pytest terminal summary.
"""

import numpy as np
import pytest
import torch
from scipy.ndimage import zoom

from acceptance_report import criterion
from oracles import blur_matrix, box_matrix, dense_bp, dense_ls
from tdiff.cli import load_normalized, main, read_records, run_ablation
from tdiff.config import ExperimentConfig
from tdiff.degradations import BoxDownsample, Composite, GaussianBlur, Identity, gaussian_taps
from tdiff.denoiser import DenoiserConfig, build_unet, diffusion_loss
from tdiff.diffusion import make_schedule, predict_x0, q_sample
from tdiff.image import to_unit
from tdiff.metrics import psnr, ssim
from tdiff.patches import aggregate, plan_grid, split
from tdiff.sampler import guidance_bp, guidance_ls, guided_update

pytestmark = pytest.mark.acceptance


def small_ops(n=8):
    taps = gaussian_taps(5, 1.0)
    return {
        "identity": (Identity((n, n)), np.eye(n * n)),
        "box2": (BoxDownsample((n, n), 2), box_matrix(n, n, 2)),
        "box4": (BoxDownsample((n, n), 4), box_matrix(n, n, 4)),
        "blur": (GaussianBlur((n, n), taps=taps), blur_matrix(n, n, taps)),
    }


def test_c01_guidance_matches_dense_oracle():
    with criterion(1, "g_BP and g_LS vs dense-matrix oracle", budget_s=10) as note:
        rng = np.random.default_rng(101)
        worst = 0.0
        cases = 0
        for n in (4, 8):
            for name, (op, A) in small_ops(n).items():
                xs = rng.standard_normal((6, n, n))
                ys = rng.standard_normal((6,) + op.out_shape)
                # every pairing of the drawn estimates and measurements
                for x in xs:
                    for y in ys:
                        for eta in (0.0, 1e-2, 0.5):
                            got = guidance_bp(x, y, op, eta).ravel()
                            worst = max(worst, np.abs(got - dense_bp(A, x, y, eta)).max())
                        for c in (1.0, 0.9):
                            got = guidance_ls(x, y, op, c).ravel()
                            worst = max(worst, np.abs(got - dense_ls(A, x, y, c)).max())
                        cases += 1
        note["detail"] = f"{cases} pairs, max abs err {worst:.2e}"
        assert worst <= 1e-10


def test_c02_adjoint_identity():
    with criterion(2, "adjoint identity <Au,v> = <u,A^T v>", budget_s=5) as note:
        rng = np.random.default_rng(202)
        shape = (16, 16)
        ops = [Identity(shape), BoxDownsample(shape, 2), BoxDownsample(shape, 4), GaussianBlur(shape),
               Composite([GaussianBlur(shape), BoxDownsample(shape, 2)])]
        worst = 0.0
        for op in ops:
            for _ in range(1000):
                u = rng.standard_normal(op.in_shape)
                v = rng.standard_normal(op.out_shape)
                lhs = np.vdot(op.forward(u), v)
                rhs = np.vdot(u, op.adjoint(v))
                worst = max(worst, abs(lhs - rhs))
        note["detail"] = f"{len(ops)} operators x 1000 pairs, max gap {worst:.2e}"
        assert worst <= 1e-10


def test_c03_aggregation_exact_and_convex():
    with criterion(3, "split/aggregate round trip and convexity", budget_s=5) as note:
        rng = np.random.default_rng(303)
        worst_round = 0.0
        worst_ratio = 0.0
        worst_excess = 0.0
        for k in range(100):
            h, w = rng.integers(16, 49, size=2)
            ps = int(rng.choice([8, 16]))
            stride = int(rng.integers(1, ps + 1))
            kind = ["flat", "raised_cosine"][k % 2]
            grid = plan_grid((h, w), ps, stride, kind)
            img = rng.standard_normal((h, w))
            err = np.abs(aggregate(split(img, grid), grid) - img)
            worst_round = max(worst_round, err.max())
            # k overlapping patches leave at most about 2k roundings per pixel
            count = np.zeros((h, w))
            for ox, oy in grid.origins:
                count[oy:oy + ps, ox:ox + ps] += 1
            bound = 2 * count * np.finfo(float).eps * np.abs(img)
            worst_ratio = max(worst_ratio, (err / np.maximum(bound, 1e-300)).max())
            preds = rng.standard_normal((len(grid), ps, ps))
            out = aggregate(preds, grid)
            lo = np.full((h, w), np.inf)
            hi = np.full((h, w), -np.inf)
            for p, (ox, oy) in zip(preds, grid.origins):
                sl = np.s_[oy:oy + ps, ox:ox + ps]
                lo[sl] = np.minimum(lo[sl], p[:h - oy, :w - ox])
                hi[sl] = np.maximum(hi[sl], p[:h - oy, :w - ox])
            worst_excess = max(worst_excess, (lo - out).max(), (out - hi).max())
        note["detail"] = (f"round-trip err {worst_round:.1e} ({worst_ratio:.2f} of rounding bound), "
                          f"min/max excess {worst_excess:.1e}")
        # exact up to floating-point accumulation: within the per-pixel rounding bound
        assert worst_ratio <= 1.0
        assert worst_excess <= 1e-14


def ablation_config(**extra):
    values = {
        "noise.gaussian_sigma": 0.1,
        "noise.fpn_column_sigma": 0.05,
        "guidance.steps": 20,
        "guidance.start_step": 100,
        "ablate.steps": 20,
    }
    values.update(extra)
    return ExperimentConfig(values)


def test_c04_overlap_reduces_seams(desk_net):
    with criterion(4, "seam energy: tiled Flat > 2x overlapped RaisedCosine", budget_s=300) as note:
        cfg = ablation_config(**{"ablate.patch_sizes": "16"})
        rows = {r["id"]: r for r in run_ablation(cfg, net=desk_net, threads=1)}
        tiled = rows["ps16-tiled"]["seam_energy"]
        overlap = rows["ps16-overlap"]["seam_energy"]
        note["detail"] = f"tiled {tiled:.4f}, overlapped {overlap:.4f}"
        assert tiled > 2 * overlap
        # the overlapped value can sit slightly below zero; demand a real margin anyway
        assert tiled > 2 * abs(overlap)


def test_c05_gradient_check():
    with criterion(5, "denoiser gradients vs central differences", budget_s=120) as note:
        net = build_unet(DenoiserConfig.preset("desk"), seed=55).double()
        sched = make_schedule()
        g = torch.Generator().manual_seed(56)
        x0 = torch.rand(4, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
        eps = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
        t = torch.tensor([0, 333, 666, 999])
        net.zero_grad()
        diffusion_loss(net, x0, t, eps, sched).backward()
        params = list(net.parameters())
        rng = np.random.default_rng(57)
        h = 1e-4
        errors = []
        while len(errors) < 16:
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                up = float(diffusion_loss(net, x0, t, eps, sched))
                p[idx] = orig - h
                down = float(diffusion_loss(net, x0, t, eps, sched))
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric))
            if scale < 1e-7:
                continue
            errors.append(abs(analytic - numeric) / scale)
        note["detail"] = f"{len(errors)} weights, max rel err {max(errors):.1e}"
        assert max(errors) <= 1e-3


def test_c06_diffusion_round_trip():
    with criterion(6, "q_sample -> predict_x0 round trip, schedule endpoints", budget_s=5) as note:
        sched = make_schedule(1000, 1e-4, 0.02)
        assert sched.beta[0] == 1e-4 and sched.beta[-1] == 0.02
        rng = np.random.default_rng(606)
        x0 = rng.uniform(-1, 1, (16, 16))
        worst = 0.0
        for t in range(sched.T):
            eps = rng.standard_normal(x0.shape)
            back = predict_x0(q_sample(x0, t, eps, sched), eps, t, sched)
            worst = max(worst, np.abs(back - x0).max())
        note["detail"] = f"max err {worst:.1e} over t=0..999"
        assert worst <= 1e-12


# --- end-to-end pieces on held-out scenes -----------------------------------

HELD_OUT = """
seed.data = 12345
seed.noise = 54321
data.count = 8
data.height = 64
data.width = 64
data.clean_dir = clean
model.preset = desk
grid.ps = 16
grid.stride = 8
guidance.steps = 20
guidance.start_step = 100
restore.checkpoint = {ckpt}
"""

DENOISE = """
operator.kind = identity
noise.gaussian_sigma = 0.1
noise.fpn_column_sigma = 0.05
guidance.gamma = 80
guidance.zeta = 0.9
data.degraded_dir = denoise/degraded
restore.input_dir = denoise/degraded
restore.output_dir = denoise/restored
evaluate.restored_dir = denoise/restored
evaluate.reference_dir = clean
evaluate.records = denoise/metrics.jsonl
evaluate.task = denoise
"""

SUPERRES = """
operator.kind = box
operator.factor = 2
noise.gaussian_sigma = 0
guidance.gamma = 1000
guidance.zeta = 0
data.degraded_dir = sr/degraded
restore.input_dir = sr/degraded
restore.output_dir = sr/restored
evaluate.restored_dir = sr/restored
evaluate.reference_dir = clean
evaluate.records = sr/metrics.jsonl
evaluate.task = superres
"""


def cli(cfg, *args, threads=1):
    code = main(["--config", str(cfg), "--threads", str(threads), *args])
    assert code == 0, f"tdiff {' '.join(args)} exited with {code}"


@pytest.fixture(scope="module")
def held_out(desk_run, tmp_path_factory):
    root = tmp_path_factory.mktemp("held_out")
    base = HELD_OUT.format(ckpt=desk_run["checkpoint"])
    configs = {}
    for name, extra in (("denoise", DENOISE), ("superres", SUPERRES)):
        configs[name] = root / f"{name}.cfg"
        configs[name].write_text(base + extra)
    cli(configs["denoise"], "gen-data")
    return root, configs


def mean_metrics(rows):
    return np.mean([r["psnr_db"] for r in rows]), np.mean([r["ssim"] for r in rows])


def test_c07_desk_restoration(desk_run, held_out):
    root, configs = held_out
    with criterion(7, "desk training, denoising gain and 2x SR vs bicubic", budget_s=15 * 60 + 300) as note:
        train_s = desk_run["train_seconds"]
        assert train_s <= 15 * 60, f"training took {train_s:.0f}s"

        cfg = configs["denoise"]
        cli(cfg, "degrade")
        cli(cfg, "restore")
        cli(cfg, "evaluate")
        restored = read_records(root / "denoise/metrics.jsonl")
        clean = sorted((root / "clean").glob("*.pgm"))
        degraded = []
        for path in clean:
            x = to_unit(load_normalized(path))
            y = to_unit(load_normalized(root / "denoise/degraded" / path.name))
            degraded.append({"psnr_db": psnr(y, x), "ssim": ssim(y, x)})
        r_psnr, r_ssim = mean_metrics(restored)
        d_psnr, d_ssim = mean_metrics(degraded)

        cfg = configs["superres"]
        cli(cfg, "degrade")
        cli(cfg, "restore")
        cli(cfg, "evaluate")
        sr = read_records(root / "sr/metrics.jsonl")
        bicubic = []
        for path in clean:
            x = to_unit(load_normalized(path))
            y = load_normalized(root / "sr/degraded" / path.name)
            up = np.clip(zoom(y, 2, order=3, mode="reflect"), -1, 1)
            bicubic.append({"psnr_db": psnr(to_unit(up), x), "ssim": ssim(to_unit(up), x)})
        s_psnr, _ = mean_metrics(sr)
        b_psnr, _ = mean_metrics(bicubic)

        note["detail"] = (f"train {train_s:.0f}s; denoise {d_psnr:.2f}->{r_psnr:.2f} dB, "
                          f"SSIM {d_ssim:.3f}->{r_ssim:.3f}; SR {s_psnr:.2f} dB vs bicubic {b_psnr:.2f} dB")
        assert len(restored) == len(sr) == 8
        assert r_psnr - d_psnr >= 2.0
        assert r_ssim > d_ssim
        assert s_psnr >= b_psnr


def test_c08_restore_is_deterministic(desk_run, held_out, tmp_path):
    root, configs = held_out
    with criterion(8, "cmd_restore byte-identical across runs and --threads") as note:
        cfg = configs["denoise"]
        if not (root / "denoise/degraded").exists():
            cli(cfg, "degrade")
        outputs = []
        for run, threads in enumerate((1, 1, 4)):
            run_cfg = tmp_path / f"run{run}.cfg"
            run_cfg.write_text(cfg.read_text()
                               + f"restore.input_dir = {root}/denoise/degraded\n"
                               + f"restore.output_dir = out{run}\n")
            cli(run_cfg, "restore", threads=threads)
            files = sorted((tmp_path / f"out{run}").glob("*.pgm"))
            outputs.append([f.read_bytes() for f in files])
        note["detail"] = f"{len(outputs[0])} images x 3 runs (threads 1, 1, 4)"
        assert len(outputs[0]) == 8
        assert outputs[0] == outputs[1] == outputs[2]


def test_c09_timing_increases_with_patch_size(desk_net):
    with criterion(9, "ablate wall-clock strictly increases with patch size") as note:
        cfg = ablation_config(**{"ablate.patch_sizes": "16,32,64", "ablate.height": 128,
                                 "ablate.width": 128})
        rows = run_ablation(cfg, net=desk_net, threads=1)
        parts = []
        for overlap in (True, False):
            secs = [r["seconds"] for r in rows if r["overlap"] is overlap]
            parts.append(("overlap " if overlap else "tiled ") + " < ".join(f"{s:.2f}s" for s in secs))
            note["detail"] = "; ".join(parts)
            assert all(a < b for a, b in zip(secs, secs[1:])), secs


def test_c10_identity_collapse():
    with criterion(10, "identity task: guided update independent of delta") as note:
        rng = np.random.default_rng(1010)
        op = Identity((32, 32))
        worst = 0.0
        for _ in range(20):
            x, y = rng.uniform(-1, 1, (2, 32, 32))
            g_bp = guidance_bp(x, y, op, 0.0)
            g_ls = guidance_ls(x, y, op, 1.0)
            worst = max(worst, np.abs(g_bp - g_ls).max())
            mu = rng.uniform(0, 1)
            ref = guided_update(x, g_bp, g_ls, mu, 0.0)
            for delta in np.linspace(0, 1, 11):
                worst = max(worst, np.abs(guided_update(x, g_bp, g_ls, mu, delta) - ref).max())
        note["detail"] = f"max deviation {worst:.1e}"
        assert worst <= 1e-12
