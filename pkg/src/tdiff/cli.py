"""``tdiff`` command line: gen-data, degrade, train, restore, evaluate, ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .degradations import NoiseModel, SingularSystemError, degrade, make_operator
from .denoiser import (
    CheckpointError,
    DenoiserConfig,
    DivergenceError,
    FlatDatasetError,
    TrainConfig,
    Trainer,
    build_unet,
    load_checkpoint,
    restore_trainer,
    sample_training_patches,
    save_checkpoint,
    torch_threads,
)
from .diffusion import make_schedule
from .image import ThermalImage, ValueDomain, load_image, normalize, save_image, to_unit
from .metrics import psnr, ssim
from .patches import plan_grid, seam_energy
from .sampler import GuidanceConfig, restore
from .scenes import SyntheticSceneSpec, generate_scene

log = logging.getLogger("tdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRESET_BY_PATCH = {16: "desk", 32: "desk32", 64: "large64", 128: "large128"}


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_output_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        for child in path.iterdir():
            if child.is_file():
                child.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    files = sorted(directory.glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm images in {directory}")
    return files


def load_normalized(path) -> np.ndarray:
    """Load a PGM as a [-1, 1] array; non-normalized data is min-max stretched."""
    img = load_image(path)
    if img.domain is ValueDomain.NORMALIZED:
        return img.data
    return normalize(img, ValueDomain.NORMALIZED, mode="minmax").data


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def _record_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def read_records(path) -> list[dict]:
    """Parse a line-delimited record file written by evaluate or ablate."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append({k: (math.inf if v == "inf" else v) for k, v in rec.items()})
    return out


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- pipeline pieces shared by subcommands --------------------------------

def scene_spec(cfg: ExperimentConfig, seed: int, extent=None) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        extent=extent or (cfg["data.height"], cfg["data.width"]),
        blob_count=cfg["data.blob_count"],
        background_gradient=cfg["data.background_gradient"],
        texture_amplitude=cfg["data.texture_amplitude"],
        edge_sharpness=cfg["data.edge_sharpness"],
        seed=seed,
    )


def operator_for(cfg: ExperimentConfig, clean_shape):
    return make_operator(cfg["operator.kind"], clean_shape, factor=cfg["operator.factor"],
                         n_taps=cfg["operator.blur_taps"], sigma=cfg["operator.blur_sigma"])


def operator_for_measurement(cfg: ExperimentConfig, y_shape):
    kind = cfg["operator.kind"].lower()
    f = cfg["operator.factor"] if kind in ("box", "blur+box") else 1
    return operator_for(cfg, (y_shape[0] * f, y_shape[1] * f))


def noise_model(cfg: ExperimentConfig) -> NoiseModel:
    return NoiseModel(cfg["noise.gaussian_sigma"], cfg["noise.fpn_column_sigma"],
                      cfg["noise.fpn_row_sigma"], cfg["noise.fpn_seed"])


def schedule(cfg: ExperimentConfig):
    return make_schedule(cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])


def guidance_config(cfg: ExperimentConfig, steps: int | None = None) -> GuidanceConfig:
    start = cfg["guidance.start_step"]
    return GuidanceConfig(
        eta_reg=cfg["guidance.eta_reg"],
        scale_ls=cfg["guidance.scale_ls"],
        gamma=cfg["guidance.gamma"],
        eta_ddim=cfg["guidance.eta_ddim"],
        zeta=cfg["guidance.zeta"],
        steps=steps or cfg["guidance.steps"],
        start_step=None if start < 0 else start,
        order=cfg["guidance.order"],
        eps_source=cfg["guidance.eps_source"],
    )


# --- subcommands ----------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = cfg["data.clean_dir"]
    _prepare_output_dir(out, args.force)
    n = cfg["data.count"]
    seeds = np.random.SeedSequence(cfg["seed.data"]).generate_state(n)
    entries = []
    for i, s in enumerate(seeds):
        spec = scene_spec(cfg, int(s))
        name = f"scene_{i:04d}.pgm"
        save_image(out / name, ThermalImage(generate_scene(spec)), seed=int(s))
        entries.append({"id": name[:-4], "file": name, "seed": int(s), "sha256": sha256_file(out / name)})
    manifest = {"kind": "clean", "count": n, "spec": asdict(scene_spec(cfg, 0)) | {"seed": None},
                "entries": entries}
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d scenes to %s", n, out)
    return EXIT_OK


def cmd_degrade(cfg: ExperimentConfig, args) -> int:
    src = cfg["data.clean_dir"]
    out = cfg["data.degraded_dir"]
    files = _list_images(src)
    _prepare_output_dir(out, args.force)
    noise = noise_model(cfg)
    entries = []
    op = None
    for i, path in enumerate(files):
        img = load_image(path)
        x = load_normalized(path)
        if op is None or op.in_shape != x.shape:
            op = operator_for(cfg, x.shape)
        y = degrade(x, op, noise, rng=_derive_seed(cfg["seed.noise"], i))
        clipped = float(np.mean(np.abs(y) > 1.0))
        save_image(out / path.name, ThermalImage(np.clip(y, -1, 1)), seed=img.meta.get("seed"))
        entries.append({"id": path.stem, "file": path.name, "clean_sha256": sha256_file(path),
                        "sha256": sha256_file(out / path.name), "clipped_fraction": clipped})
    manifest = {"kind": "degraded", "operator": op.params(), "out_shape": list(op.out_shape),
                "noise": asdict(noise), "entries": entries}
    if "factor" in op.params() or cfg["operator.kind"] == "blur+box":
        manifest["factor"] = cfg["operator.factor"]
    _write_json(out / "manifest.json", manifest)
    log.info("degraded %d images into %s (%r)", len(files), out, op)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    files = _list_images(cfg["data.clean_dir"])
    images = [load_normalized(p) for p in files]
    net_cfg = DenoiserConfig.preset(cfg["model.preset"])
    tcfg = TrainConfig(learning_rate=cfg["train.learning_rate"], batch_size=cfg["train.batch_size"],
                       epochs=cfg["train.epochs"], variance_threshold=cfg["train.variance_threshold"])
    total = cfg["train.steps"] or tcfg.epochs * len(images)
    ckpt = cfg["train.checkpoint"]
    loss_log = cfg["train.loss_log"]
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    loss_log.parent.mkdir(parents=True, exist_ok=True)

    sched = schedule(cfg)
    patch_rng = np.random.default_rng(_derive_seed(cfg["seed.train"], 1))
    if cfg["train.resume"] and ckpt.exists():
        net, header = load_checkpoint(ckpt, expect=net_cfg)
        trainer = Trainer(net, sched, tcfg, seed=cfg["seed.train"])
        restore_trainer(trainer, header)
        patch_rng.bit_generator.state = header["sampler_rng_state"]
        log.info("resuming from %s at step %d", ckpt, trainer.step)
        mode = "a"
    else:
        net = build_unet(net_cfg, seed=cfg["seed.init"])
        trainer = Trainer(net, sched, tcfg, seed=cfg["seed.train"])
        mode = "w"

    def checkpoint():
        save_checkpoint(ckpt, net, trainer, extra={"sampler_rng_state": patch_rng.bit_generator.state})

    with torch_threads(args.threads), open(loss_log, mode) as fh:
        while trainer.step < total:
            batch = sample_training_patches(images, net_cfg.patch_size, tcfg.variance_threshold,
                                            tcfg.batch_size, patch_rng)
            loss = trainer.train_step(batch)
            fh.write(f"{trainer.step} {loss:.8g}\n")
            if trainer.step % 100 == 0:
                log.info("step %d/%d loss %.5f", trainer.step, total, loss)
            if cfg["train.checkpoint_every"] and trainer.step % cfg["train.checkpoint_every"] == 0:
                checkpoint()
    checkpoint()
    log.info("saved %s after %d steps", ckpt, trainer.step)
    return EXIT_OK


def _load_net(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    return net


def _snapshotter(snap_dir: Path, every: int, op, y):
    """Callback that dumps numbered frames and logs the data residual."""
    snap_dir.mkdir(parents=True, exist_ok=True)

    def callback(k, t, x, x0):
        if k % every == 0:
            save_image(snap_dir / f"step_{k:04d}_t{t:04d}.pgm", ThermalImage(np.clip(x, -1, 1)))
            log.info("step %d t=%d residual |Ax0-y| = %.5g", k, t, float(np.linalg.norm(op.forward(x0) - y)))
    return callback


def cmd_restore(cfg: ExperimentConfig, args) -> int:
    net = _load_net(cfg["restore.checkpoint"])
    files = _list_images(cfg["restore.input_dir"])
    out = cfg["restore.output_dir"]
    _prepare_output_dir(out, args.force)
    sched = schedule(cfg)
    gcfg = guidance_config(cfg)
    every = cfg["restore.snapshot_every"]
    for i, path in enumerate(files):
        y = load_normalized(path)
        op = operator_for_measurement(cfg, y.shape)
        grid = plan_grid(op.in_shape, cfg["grid.ps"], cfg["grid.stride"], cfg["grid.window"])
        callback = _snapshotter(out / "snapshots" / path.stem, every, op, y) if every > 0 else None
        t0 = time.perf_counter()
        x = restore(y, op, net, sched, grid, gcfg, rng=_derive_seed(cfg["seed.restore"], i),
                    threads=args.threads, callback=callback)
        elapsed = time.perf_counter() - t0
        save_image(out / path.name, ThermalImage(x))
        _write_json(out / f"{path.stem}.json", {
            "input": str(path), "operator": op.params(), "seconds": elapsed,
            "grid": {"ps": grid.ps, "stride": grid.stride, "window": grid.window_kind},
            "guidance": {k: v for k, v in asdict(gcfg).items() if not k.endswith("_schedule")},
        })
        log.info("restored %s in %.1fs", path.name, elapsed)
    return EXIT_OK


def evaluate_dirs(restored_dir: Path, reference_dir: Path, task: str) -> list[dict]:
    rows = []
    for path in _list_images(restored_dir):
        ref_path = reference_dir / path.name
        if not ref_path.exists():
            raise FileNotFoundError(f"no reference image for {path.name} in {reference_dir}")
        est, ref = to_unit(load_normalized(path)), to_unit(load_normalized(ref_path))
        if est.shape != ref.shape:
            raise ValueError(f"{path.name}: shape {est.shape} differs from reference {ref.shape}")
        rows.append({"id": path.stem, "task": task, "psnr_db": psnr(est, ref, 1.0), "ssim": ssim(est, ref, 1.0)})
    return rows


def write_records(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: _record_value(v) for k, v in row.items()}, sort_keys=True) + "\n")


def format_table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    rows = evaluate_dirs(cfg["evaluate.restored_dir"], cfg["evaluate.reference_dir"], cfg["evaluate.task"])
    write_records(cfg["evaluate.records"], rows)
    mean = {"id": "MEAN", "task": cfg["evaluate.task"],
            "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}
    print(format_table(rows + [mean], ["id", "task", "psnr_db", "ssim"]))
    return EXIT_OK


def run_ablation(cfg: ExperimentConfig, net=None, threads: int = 1) -> list[dict]:
    """Restore one synthetic scene for every patch size with and without overlap.

    ``net`` (or the checkpoint at ``restore.checkpoint``) is used for its own
    patch size; other sizes use untrained preset networks, which is enough for
    timing but not for quality.
    """
    extent = (cfg["ablate.height"], cfg["ablate.width"])
    clean = generate_scene(scene_spec(cfg, cfg["ablate.scene_seed"], extent))
    op = operator_for(cfg, extent)
    y = degrade(clean, op, noise_model(cfg), rng=_derive_seed(cfg["seed.noise"], 10**6))
    if net is None and cfg["restore.checkpoint"].exists():
        net = _load_net(cfg["restore.checkpoint"])
    sched = schedule(cfg)
    gcfg = guidance_config(cfg, steps=cfg["ablate.steps"])
    rows = []
    for ps in cfg["ablate.patch_sizes"]:
        if net is not None and net.config.patch_size == ps:
            model, trained = net, True
        else:
            if ps not in PRESET_BY_PATCH:
                raise ValueError(f"no network preset for patch size {ps}")
            model, trained = build_unet(DenoiserConfig.preset(PRESET_BY_PATCH[ps]), seed=cfg["seed.init"]), False
        for overlap in (True, False):
            grid = plan_grid(extent, ps, ps // 2 if overlap else ps, "raised_cosine" if overlap else "flat")
            # one warm-up evaluation so allocator start-up is not timed
            restore(y, op, model, sched, grid, GuidanceConfig(steps=1), rng=0, threads=threads)
            t0 = time.perf_counter()
            x = restore(y, op, model, sched, grid, gcfg, rng=cfg["seed.restore"], threads=threads)
            elapsed = time.perf_counter() - t0
            ref = to_unit(clean)
            rows.append({
                "id": f"ps{ps}-{'overlap' if overlap else 'tiled'}", "task": "ablate", "ps": ps,
                "overlap": overlap, "trained": trained, "psnr_db": psnr(to_unit(x), ref),
                "ssim": ssim(to_unit(x), ref), "seam_energy": seam_energy(x, grid), "seconds": elapsed,
            })
            log.info("%s: %.2f dB, seam %.4g, %.2fs", rows[-1]["id"], rows[-1]["psnr_db"],
                     rows[-1]["seam_energy"], elapsed)
    return rows


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    rows = run_ablation(cfg, threads=args.threads)
    write_records(cfg["ablate.records"], rows)
    print(format_table(rows, ["id", "trained", "psnr_db", "ssim", "seam_energy", "seconds"]))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tdiff", description=__doc__)
    parser.add_argument("--config", type=Path, help="experiment config file")
    parser.add_argument("--seed", type=int, help="override every named seed in the config")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--force", action="store_true", help="overwrite non-empty output directories")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("command", choices=sorted(COMMANDS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError, SingularSystemError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (FileNotFoundError, CheckpointError, FlatDatasetError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
