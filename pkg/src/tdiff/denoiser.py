"""Noise-prediction U-Net, its training step and patch sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DiffusionSchedule
from .image import make_rng

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when training or inference produces non-finite values."""


class FlatDatasetError(RuntimeError):
    pass


@dataclass
class DenoiserConfig:
    patch_size: int = 16
    base_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2)
    time_embed_dim: int = 32
    num_res_blocks: int = 1
    groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        depth = len(self.channel_multipliers)
        if depth < 1:
            raise ValueError("need at least one resolution level")
        if self.patch_size % 2 ** (depth - 1):
            raise ValueError("patch size must be divisible by 2^(depth-1)")
        if self.patch_size // 2 ** (depth - 1) < 2:
            raise ValueError(
                f"{depth} levels reduce a {self.patch_size}px patch below 2px"
            )

    @classmethod
    def preset(cls, name: str) -> "DenoiserConfig":
        return cls(**PRESETS[name])


PRESETS = {
    "desk": dict(patch_size=16, base_channels=8, channel_multipliers=(1, 2), time_embed_dim=32),
    "desk32": dict(patch_size=32, base_channels=16, channel_multipliers=(1, 2, 2), time_embed_dim=64),
    "large64": dict(patch_size=64, base_channels=32, channel_multipliers=(1, 1, 2, 2, 4, 4),
                    time_embed_dim=128),
    "large128": dict(patch_size=128, base_channels=64, channel_multipliers=(1, 1, 2, 2, 4, 4),
                     time_embed_dim=256),
}


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 384
    epochs: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    variance_threshold: float = 0.6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(ch, groups)
    return nn.GroupNorm(g, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, groups):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Convolutional encoder-decoder predicting the added noise.

    One level per channel multiplier; every level but the last halves the
    resolution. The timestep embedding is injected into every residual block.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        ed = c.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(ed, 2 * ed), nn.SiLU(), nn.Linear(2 * ed, 2 * ed))
        emb = 2 * ed
        chans = [c.base_channels * m for m in c.channel_multipliers]
        self.conv_in = nn.Conv2d(1, c.base_channels, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [c.base_channels]
        ch = c.base_channels
        for level, out_ch in enumerate(chans):
            for _ in range(c.num_res_blocks):
                self.down.append(ResBlock(ch, out_ch, emb, c.groups))
                ch = out_ch
                skips.append(ch)
            if level < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)
        self.mid = ResBlock(ch, ch, emb, c.groups)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, out_ch in reversed(list(enumerate(chans))):
            for _ in range(c.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), out_ch, emb, c.groups))
                ch = out_ch
            if level > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = _norm(ch, c.groups)
        self.conv_out = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[:, None]
        ps = self.config.patch_size
        if x.shape[-2:] != (ps, ps):
            raise ValueError(f"expected {ps}x{ps} patches, got {tuple(x.shape[-2:])}")
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(x.dtype))
        n_res = self.config.num_res_blocks
        n_levels = len(self.config.channel_multipliers)

        h = self.conv_in(x)
        hs = [h]
        blocks = iter(self.down)
        for level in range(n_levels):
            for _ in range(n_res):
                h = next(blocks)(h, emb)
                hs.append(h)
            if level < n_levels - 1:
                h = self.downsample[level](h)
                hs.append(h)
        h = self.mid(h, emb)
        blocks = iter(self.up)
        ups = iter(self.upsample)
        for level in reversed(range(n_levels)):
            for _ in range(n_res + 1):
                h = next(blocks)(torch.cat([h, hs.pop()], dim=1), emb)
            if level > 0:
                h = next(ups)(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[:, 0] if squeeze else out


def build_unet(config: DenoiserConfig, seed: int = 0) -> UNet:
    """Construct a net whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(config)
    return net


@contextmanager
def torch_threads(n: int | None):
    if n is None:
        yield
        return
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, int(n)))
    try:
        yield
    finally:
        torch.set_num_threads(old)


def predict_noise(net: nn.Module, patches: np.ndarray, t: int | np.ndarray) -> np.ndarray:
    """Evaluate ``net`` on a ``(n, ps, ps)`` numpy stack; returns float64."""
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(patches)).to(dtype)
    tt = torch.as_tensor(np.broadcast_to(np.asarray(t), (len(patches),)).copy(), dtype=torch.long)
    with torch.no_grad():
        out = net(x, tt)
    out = out.to(torch.float64).numpy()
    if not np.all(np.isfinite(out)):
        raise DivergenceError("denoiser produced non-finite output")
    return out


def diffusion_loss(net, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   sched: DiffusionSchedule) -> torch.Tensor:
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=x0.dtype)[t][:, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return torch.mean((eps - net(x_t, t)) ** 2)


class Trainer:
    """Adam training loop for the epsilon-prediction objective.

    All randomness (timesteps and noise) comes from one numpy stream, so a
    seed fixes the whole loss curve.
    """

    def __init__(self, net: UNet, sched: DiffusionSchedule, cfg: TrainConfig, seed: int = 0):
        self.net = net
        self.sched = sched
        self.cfg = cfg
        self.rng = make_rng(seed)
        self.step = 0
        self.optimizer = torch.optim.Adam(
            net.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.adam_eps
        )

    def train_step(self, batch: np.ndarray) -> float:
        """One Adam update on a ``(n, ps, ps)`` batch of clean patches in [-1, 1]."""
        batch = np.asarray(batch, dtype=np.float64)
        n = len(batch)
        t = self.rng.integers(0, self.sched.T, size=n)
        eps = self.rng.standard_normal(batch.shape)
        dtype = next(self.net.parameters()).dtype
        self.net.train()
        loss = diffusion_loss(
            self.net,
            torch.from_numpy(batch).to(dtype),
            torch.from_numpy(t),
            torch.from_numpy(eps).to(dtype),
            self.sched,
        )
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return value


def patch_variance(patches: np.ndarray) -> np.ndarray:
    return np.var(patches.reshape(len(patches), -1), axis=1)


def sample_training_patches(images, ps: int, threshold: float, count: int, rng,
                            max_rejections: int = 1000) -> np.ndarray:
    """Uniform random crops whose variance strictly exceeds ``threshold``.

    Each slot is retried up to ``max_rejections`` times before giving up.
    """
    rng = make_rng(rng)
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("empty dataset")
    for im in images:
        if im.shape[0] < ps or im.shape[1] < ps:
            raise ValueError(f"image {im.shape} smaller than patch size {ps}")
    out = np.empty((count, ps, ps))
    for k in range(count):
        for _ in range(max_rejections + 1):
            im = images[rng.integers(len(images))]
            y = rng.integers(im.shape[0] - ps + 1)
            x = rng.integers(im.shape[1] - ps + 1)
            crop = im[y:y + ps, x:x + ps]
            if np.var(crop) > threshold:
                out[k] = crop
                break
        else:
            raise FlatDatasetError(
                f"no patch with variance > {threshold} after {max_rejections} rejections"
            )
    return out


# --- checkpoints ----------------------------------------------------------

MAGIC = b"TDIFFCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out, pos


def save_checkpoint(path, net: UNet, trainer: Trainer | None = None, extra: dict | None = None) -> str:
    """Write weights (and optional Adam state) and return the SHA-256 digest.

    Layout: magic, u32 version, u32 header length, JSON header, tensor table
    (name, shape, little-endian float32 data), then a 32-byte SHA-256 of
    everything before it.
    """
    header = {"config": asdict(net.config), "step": 0}
    if extra:
        header.update(extra)
    tensors = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    if trainer is not None:
        header["step"] = trainer.step
        header["train"] = asdict(trainer.cfg)
        header["rng_state"] = trainer.rng.bit_generator.state
        state = trainer.optimizer.state_dict()
        names = [name for name, _ in net.named_parameters()]
        adam_steps = {}
        for idx, st in state["state"].items():
            name = names[idx]
            tensors[f"adam.{name}.exp_avg"] = st["exp_avg"].numpy()
            tensors[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            adam_steps[name] = float(st["step"])
        header["adam_steps"] = adam_steps
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + _pack_tensors(tensors)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < len(MAGIC) + 40 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tdiff checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = len(MAGIC) + 8
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    tensors, _ = _unpack_tensors(body, pos + hlen)
    return header, tensors


def load_checkpoint(path, expect: DenoiserConfig | None = None) -> tuple[UNet, dict]:
    header, tensors = read_checkpoint(path)
    config = DenoiserConfig(**header["config"])
    if expect is not None and asdict(expect) != asdict(config):
        raise CheckpointError(f"{path}: checkpoint config {config} does not match {expect}")
    net = UNet(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("adam.")}
    net.load_state_dict(state)
    net.eval()
    return net, header | {"tensors": tensors}


def restore_trainer(trainer: Trainer, header: dict) -> None:
    """Load Adam moments, step counter and RNG state saved by :func:`save_checkpoint`."""
    tensors = header["tensors"]
    trainer.step = int(header.get("step", 0))
    if "rng_state" in header:
        trainer.rng.bit_generator.state = header["rng_state"]
    steps = header.get("adam_steps", {})
    names = [name for name, _ in trainer.net.named_parameters()]
    state = trainer.optimizer.state_dict()
    for idx, name in enumerate(names):
        if name not in steps:
            continue
        state["state"][idx] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(tensors[f"adam.{name}.exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[f"adam.{name}.exp_avg_sq"]),
        }
    trainer.optimizer.load_state_dict(state)
