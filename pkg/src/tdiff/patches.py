"""Overlapping tiling plans, blending windows and windowed aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import PatchRef, extract_patch, insert_weighted

WINDOW_FLOOR = 1e-3


def make_window(ps: int, kind: str = "raised_cosine") -> np.ndarray:
    """``ps x ps`` blending weights.

    ``raised_cosine`` is the outer product of a half-sample shifted Hann
    profile plus a small floor. The Hann part sums to exactly one when shifted
    by ``ps / 2``, and the floor keeps border pixels of border patches weighted.
    """
    if ps < 2:
        raise ValueError("window size must be >= 2")
    kind = kind.lower().replace("-", "_")
    if kind == "flat":
        return np.ones((ps, ps))
    if kind in ("raised_cosine", "raisedcosine", "hann"):
        i = np.arange(ps) + 0.5
        prof = np.sin(np.pi * i / ps) ** 2
        prof = 0.5 * (prof + prof[::-1]) + WINDOW_FLOOR  # exact mirror symmetry
        return np.outer(prof, prof)
    raise ValueError(f"unknown window kind {kind!r}")


def _axis_origins(extent: int, ps: int, stride: int) -> list[int]:
    if ps >= extent:
        return [0]
    origins = list(range(0, extent - ps + 1, stride))
    if origins[-1] != extent - ps:
        origins.append(extent - ps)
    return origins


@dataclass
class PatchGrid:
    extent: tuple[int, int]  # (height, width)
    ps: int
    stride: int
    origins: list[tuple[int, int]]  # (x, y), row-major order
    window: np.ndarray = field(repr=False)
    window_kind: str = "raised_cosine"

    def __len__(self):
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        """Per-pixel sum of window weights."""
        acc = np.zeros(self.extent)
        wmap = np.zeros(self.extent)
        for ox, oy in self.origins:
            insert_weighted(acc, wmap, PatchRef(ox, oy, self.ps, self.window), self.window)
        return wmap

    def boundaries(self, axis: int) -> list[int]:
        """Interior positions ``c`` where a patch edge falls between ``c - 1`` and ``c``.

        ``axis=1`` gives column positions, ``axis=0`` row positions.
        """
        n = self.extent[axis]
        starts = sorted({o[0] if axis == 1 else o[1] for o in self.origins})
        edges = set()
        for s in starts:
            for c in (s, s + self.ps):
                if 0 < c < n:
                    edges.add(c)
        return sorted(edges)


def plan_grid(extent, ps: int, stride: int | None = None, window: str = "raised_cosine",
              allow_padding: bool = True) -> PatchGrid:
    """Regular lattice of patch origins; the last row/column is clamped to the edge.

    ``extent`` is ``(height, width)``. When ``ps`` exceeds the image a single
    origin is used and the missing pixels are reflected, unless
    ``allow_padding`` is false.
    """
    h, w = (int(extent), int(extent)) if np.isscalar(extent) else (int(extent[0]), int(extent[1]))
    ps = int(ps)
    stride = ps // 2 if stride is None else int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if ps > h or ps > w:
        if not allow_padding:
            raise ValueError(f"patch size {ps} exceeds image extent {w}x{h}")
        if ps > 2 * h or ps > 2 * w:
            raise ValueError(f"patch size {ps} exceeds twice the image extent {w}x{h}")
    ys = _axis_origins(h, ps, stride)
    xs = _axis_origins(w, ps, stride)
    origins = [(x, y) for y in ys for x in xs]
    return PatchGrid((h, w), ps, stride, origins, make_window(ps, window), window)


def split(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack of all grid patches, shape ``(n_patches, ps, ps)``, in grid order."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != grid.extent:
        raise ValueError(f"image shape {img.shape} does not match grid extent {grid.extent}")
    return np.stack([extract_patch(img, o, grid.ps).data for o in grid.origins])


def aggregate(predictions, grid: PatchGrid) -> np.ndarray:
    """Window-weighted average of per-patch predictions.

    ``predictions`` is either an array ``(n_patches, ps, ps)`` in grid order or
    an iterable of ``(patch, (x, y))`` pairs. Accumulation always runs in grid
    order so the result does not depend on the order predictions arrive in.
    """
    if isinstance(predictions, np.ndarray):
        if predictions.shape != (len(grid), grid.ps, grid.ps):
            raise ValueError("prediction stack does not match the grid")
        by_origin = dict(zip(grid.origins, predictions))
    else:
        by_origin = {}
        for patch, origin in predictions:
            data = patch.data if isinstance(patch, PatchRef) else np.asarray(patch)
            by_origin[tuple(origin)] = data
        if set(by_origin) != set(grid.origins):
            raise ValueError("predictions do not align with grid origins")
    acc = np.zeros(grid.extent)
    wmap = np.zeros(grid.extent)
    for ox, oy in grid.origins:
        insert_weighted(acc, wmap, PatchRef(ox, oy, grid.ps, by_origin[(ox, oy)]), grid.window)
    if np.any(wmap <= 0):
        raise ValueError("grid leaves pixels with zero total weight")
    return acc / wmap


def second_difference(img: np.ndarray, axis: int) -> np.ndarray:
    """``x[i+1] - 2 x[i] + x[i-1]`` along ``axis``; index 0 is pixel 1."""
    img = np.asarray(img, dtype=np.float64)
    if axis == 1:
        return img[:, 2:] - 2 * img[:, 1:-1] + img[:, :-2]
    return img[2:, :] - 2 * img[1:-1, :] + img[:-2, :]


def seam_energy(img: np.ndarray, grid: PatchGrid) -> float:
    """Excess mean |second difference| on patch-boundary lines.

    For every interior patch edge between pixels ``c - 1`` and ``c`` the two
    adjacent lines count as boundary lines. The statistic is the mean absolute
    second difference across those lines minus the mean over all other lines,
    pooled over both axes. It is zero for images without seam structure.
    """
    img = np.asarray(img, dtype=np.float64)
    on, off = [], []
    for axis in (1, 0):
        d2 = np.abs(second_difference(img, axis))
        n = img.shape[axis]
        if n < 3:
            continue
        mask = np.zeros(n - 2, dtype=bool)
        for c in grid.boundaries(axis):
            for line in (c - 1, c):
                if 1 <= line <= n - 2:
                    mask[line - 1] = True
        per_line = d2.mean(axis=0) if axis == 1 else d2.mean(axis=1)
        on.append(per_line[mask])
        off.append(per_line[~mask])
    on = np.concatenate(on) if on else np.array([])
    off = np.concatenate(off) if off else np.array([])
    if on.size == 0:
        return 0.0
    return float(on.mean() - (off.mean() if off.size else 0.0))
