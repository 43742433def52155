"""Flat ``section.key = value`` experiment configuration.

Every key has a typed default below; unknown keys are rejected. Relative
paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import logging
from pathlib import Path

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Path_(str):
    """Marker type for path-valued keys."""


DEFAULTS: dict[str, object] = {
    # named seeds; every random stream in a run derives from one of these
    "seed.data": 1,
    "seed.noise": 2,
    "seed.init": 3,
    "seed.train": 4,
    "seed.restore": 5,
    # synthetic corpus
    "data.clean_dir": Path_("data/clean"),
    "data.degraded_dir": Path_("data/degraded"),
    "data.count": 32,
    "data.height": 64,
    "data.width": 64,
    "data.blob_count": 3,
    "data.background_gradient": 0.4,
    "data.texture_amplitude": 0.2,
    "data.edge_sharpness": 1.0,
    # degradation operator A and noise n
    "operator.kind": "identity",
    "operator.factor": 2,
    "operator.blur_taps": 5,
    "operator.blur_sigma": 1.0,
    "noise.gaussian_sigma": 0.1,
    "noise.fpn_column_sigma": 0.0,
    "noise.fpn_row_sigma": 0.0,
    "noise.fpn_seed": 7,
    # diffusion schedule
    "schedule.steps": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    # denoiser and training
    "model.preset": "desk",
    "train.learning_rate": 2e-4,
    "train.batch_size": 64,
    "train.steps": 0,
    "train.epochs": 1,
    "train.variance_threshold": 0.6,
    "train.checkpoint": Path_("runs/model.ckpt"),
    "train.checkpoint_every": 500,
    "train.loss_log": Path_("runs/loss.log"),
    "train.resume": False,
    # tiling
    "grid.ps": 16,
    "grid.stride": 8,
    "grid.window": "raised_cosine",
    # guided sampling
    "guidance.eta_reg": 0.0,
    "guidance.scale_ls": 0.9,
    "guidance.gamma": 80.0,
    "guidance.eta_ddim": 0.7,
    "guidance.zeta": 0.9,
    "guidance.steps": 100,
    "guidance.start_step": -1,
    "guidance.order": "x0",
    "guidance.eps_source": "recompute",
    # restore / evaluate / ablate
    "restore.input_dir": Path_("data/degraded"),
    "restore.output_dir": Path_("runs/restored"),
    "restore.checkpoint": Path_("runs/model.ckpt"),
    "restore.snapshot_every": 0,
    "evaluate.reference_dir": Path_("data/clean"),
    "evaluate.restored_dir": Path_("runs/restored"),
    "evaluate.records": Path_("runs/metrics.jsonl"),
    "evaluate.task": "denoise",
    "ablate.patch_sizes": [16, 32, 64],
    "ablate.records": Path_("runs/ablate.jsonl"),
    "ablate.height": 64,
    "ablate.width": 64,
    "ablate.scene_seed": 999,
    "ablate.steps": 20,
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(v) for v in text.replace(",", " ").split()]
        if isinstance(default, Path_):
            return Path_(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


class ExperimentConfig:
    """Typed view of a config file. Access values as ``cfg["grid.ps"]``."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), base_dir=path.resolve().parent)

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "ExperimentConfig":
        cfg = cls(base_dir=base_dir)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            cfg.set(key.strip(), value.strip())
        return cfg

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(key, value, default)
        elif isinstance(default, Path_):
            value = Path_(str(value))
        self.values[key] = value
        if isinstance(default, Path_) and Path(value).is_absolute():
            log.warning("%s uses an absolute path (%s); prefer paths relative to the config", key, value)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        value = self.values[key]
        if isinstance(DEFAULTS[key], Path_):
            return self.base_dir / value
        return value

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: self[k] for k in self.values if k.startswith(prefix)}

    def override_seed(self, seed: int) -> None:
        """Replace every named seed with one derived from ``seed``."""
        for i, key in enumerate(sorted(k for k in DEFAULTS if k.startswith("seed."))):
            self.values[key] = int(seed) + i

    def dumps(self) -> str:
        lines = []
        for key in DEFAULTS:
            value = self.values[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
