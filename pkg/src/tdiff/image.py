"""Single-channel image container, normalization and patch primitives.

Everything numeric is done on float64 numpy arrays shaped ``(height, width)``.
:class:`ThermalImage` only adds the value-domain bookkeeping needed for I/O.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ValueDomain(enum.Enum):
    NORMALIZED = "Normalized"
    RAW16 = "Raw16"
    UNIT = "Unit"

    @property
    def bounds(self) -> tuple[float, float]:
        return _BOUNDS[self]


_BOUNDS = {
    ValueDomain.NORMALIZED: (-1.0, 1.0),
    ValueDomain.RAW16: (0.0, 65535.0),
    ValueDomain.UNIT: (0.0, 1.0),
}


@dataclass
class ThermalImage:
    data: np.ndarray
    domain: ValueDomain = ValueDomain.NORMALIZED
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {data.shape}")
        lo, hi = self.domain.bounds
        if data.size and (data.min() < lo or data.max() > hi):
            raise ValueError(
                f"values [{data.min():.6g}, {data.max():.6g}] outside {self.domain.value} bounds"
            )
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def normalize(img: ThermalImage, target: ValueDomain, mode: str = "bounds") -> ThermalImage:
    """Affinely map ``img`` onto the ``target`` value domain.

    ``mode="bounds"`` maps the source domain bounds onto the target bounds and
    is exactly invertible. ``mode="minmax"`` stretches the per-image
    ``[min, max]`` onto the target; the original range is stored in
    ``meta["minmax"]`` so :func:`denormalize` can undo it. A constant image has
    no range and is mapped to the target midpoint.
    """
    t_lo, t_hi = target.bounds
    meta = dict(img.meta)
    if mode == "bounds":
        s_lo, s_hi = img.domain.bounds
    elif mode == "minmax":
        s_lo, s_hi = float(img.data.min()), float(img.data.max())
        meta["minmax"] = (s_lo, s_hi)
        if s_hi == s_lo:
            mid = np.full_like(img.data, 0.5 * (t_lo + t_hi))
            return ThermalImage(mid, target, meta)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = t_lo + (img.data - s_lo) / (s_hi - s_lo) * (t_hi - t_lo)
    return ThermalImage(np.clip(out, t_lo, t_hi), target, meta)


def denormalize(img: ThermalImage, source: ValueDomain) -> ThermalImage:
    """Inverse of :func:`normalize`, honouring a stored ``minmax`` range."""
    meta = dict(img.meta)
    if "minmax" in meta:
        lo, hi = meta.pop("minmax")
        if hi == lo:
            return ThermalImage(np.full_like(img.data, lo), source, meta)
        c_lo, c_hi = img.domain.bounds
        out = lo + (img.data - c_lo) * ((hi - lo) / (c_hi - c_lo))
        return ThermalImage(out, source, meta)
    return normalize(ThermalImage(img.data, img.domain, meta), source)


def to_unit(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into ``[0, n)`` without repeating the edge sample.

    Index ``-1`` maps to ``1`` and ``n`` maps to ``n - 2`` (numpy's
    ``mode="reflect"``). Valid for ``-n < idx < 2n - 1``; for ``n == 1``
    everything maps to 0.
    """
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


@dataclass
class PatchRef:
    origin_x: int
    origin_y: int
    size: int
    data: np.ndarray


def extract_patch(img: np.ndarray, origin: tuple[int, int], ps: int) -> PatchRef:
    """Copy a ``ps x ps`` window whose top-left corner is ``origin = (x, y)``.

    Reads that fall outside the image are reflected.
    """
    img = np.asarray(img, dtype=np.float64)
    if ps < 1:
        raise ValueError("patch size must be >= 1")
    h, w = img.shape
    if ps > 2 * h or ps > 2 * w:
        raise ValueError(f"patch size {ps} exceeds twice the image extent {w}x{h}")
    ox, oy = origin
    rows = reflect_index(np.arange(oy, oy + ps), h)
    cols = reflect_index(np.arange(ox, ox + ps), w)
    return PatchRef(ox, oy, ps, img[np.ix_(rows, cols)])


def insert_weighted(
    accumulator: np.ndarray,
    weight_map: np.ndarray,
    patch: PatchRef,
    window: np.ndarray,
) -> None:
    """Accumulate ``window * patch`` and ``window`` in place.

    Patch pixels that land outside the image are dropped.
    """
    if accumulator.shape != weight_map.shape:
        raise ValueError("accumulator and weight map differ in shape")
    h, w = accumulator.shape
    ps = patch.size
    ox, oy = patch.origin_x, patch.origin_y
    y0, y1 = max(oy, 0), min(oy + ps, h)
    x0, x1 = max(ox, 0), min(ox + ps, w)
    if y0 >= y1 or x0 >= x1:
        return
    win = window[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    accumulator[y0:y1, x0:x1] += win * patch.data[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    weight_map[y0:y1, x0:x1] += win


@dataclass(frozen=True)
class SeededRng:
    """A named, reproducible random stream.

    PCG64 streams are specified bit-for-bit by numpy, so a seed gives the same
    samples on every platform.
    """

    seed: int
    algorithm_id: str = "numpy.PCG64"

    def generator(self) -> np.random.Generator:
        if self.algorithm_id != "numpy.PCG64":
            raise ValueError(f"unsupported generator {self.algorithm_id!r}")
        return np.random.Generator(np.random.PCG64(self.seed))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, SeededRng):
        return seed.generator()
    return SeededRng(int(seed)).generator()


# --- PGM I/O --------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pgm(path, return_maxval: bool = False):
    """Read a binary (P5) PGM and return the raw integer samples."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(width), int(height), int(maxval)
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h
    if len(buf) - pos < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated pixel data")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    data = data.reshape(h, w).astype(np.int64)
    return (data, maxval) if return_maxval else data


def write_pgm(path, samples: np.ndarray, maxval: int = 65535) -> None:
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    if samples.min() < 0 or samples.max() > maxval:
        raise ValueError("PGM samples out of range")
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def save_image(path, img: ThermalImage, seed: int | None = None) -> None:
    """Write ``img`` as a 16-bit PGM plus a ``.meta`` sidecar.

    The sidecar stores the image's value domain so :func:`load_image` can map
    the integer samples back. Values are quantized to 65536 levels.
    """
    lo, hi = img.domain.bounds
    raw = np.rint((np.clip(img.data, lo, hi) - lo) * (65535.0 / (hi - lo)))
    write_pgm(path, raw.astype(np.int64))
    lines = [f"value_domain = {img.domain.value}"]
    if seed is not None:
        lines.append(f"seed = {int(seed)}")
    if "minmax" in img.meta:
        lines.append("minmax = {} {}".format(*(repr(float(v)) for v in img.meta["minmax"])))
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    out = {}
    side = _sidecar(path)
    if not side.exists():
        return out
    for line in side.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_image(path) -> ThermalImage:
    """Read a PGM written by :func:`save_image` (or a plain 8/16-bit PGM).

    Without a sidecar the samples are taken as Raw16 (16-bit) or Unit (8-bit,
    scaled by 1/255).
    """
    raw, buf_max = read_pgm(path, return_maxval=True)
    meta = read_sidecar(path)
    if "value_domain" in meta:
        domain = ValueDomain(meta["value_domain"])
        lo, hi = domain.bounds
        data = lo + raw.astype(np.float64) * ((hi - lo) / buf_max)
    elif buf_max > 255:
        domain, data = ValueDomain.RAW16, raw.astype(np.float64) * (65535.0 / buf_max)
    else:
        domain, data = ValueDomain.UNIT, raw.astype(np.float64) / buf_max
    extra = {}
    if "minmax" in meta:
        extra["minmax"] = tuple(float(v) for v in meta["minmax"].split())
    if "seed" in meta:
        extra["seed"] = int(meta["seed"])
    return ThermalImage(data, domain, extra)
