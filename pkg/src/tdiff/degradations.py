"""Linear degradation operators and the thermal noise model.

Each operator maps a ``(h, w)`` array to its measurement and exposes the
adjoint and a structured solve of ``(A A^T + eta I) w = r``:

* ``Identity``       -- trivial.
* ``BoxDownsample``  -- block means; ``A A^T = I / f^2`` so the solve is a scale.
* ``GaussianBlur``   -- separable circular convolution; diagonal in Fourier.
* ``Composite``      -- a chain of the above, solved with conjugate gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .image import make_rng

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


def _check(x: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {x.shape}")
    return x


class LinearOperator:
    """Base class. Subclasses implement ``_forward``, ``_adjoint``, ``_solve``."""

    kind = "abstract"

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)

    def forward(self, x):
        return self._forward(_check(x, self.in_shape, f"{self.kind} forward"))

    def adjoint(self, v):
        return self._adjoint(_check(v, self.out_shape, f"{self.kind} adjoint"))

    def solve_gram(self, r, eta: float = 0.0):
        """Return ``w`` with ``(A A^T + eta I) w = r``."""
        if eta < 0:
            raise ValueError("eta must be >= 0")
        return self._solve(_check(r, self.out_shape, f"{self.kind} solve_gram"), float(eta))

    def gram(self, w):
        return self.forward(self.adjoint(w))

    def back_project(self, r, eta: float = 0.0):
        """``A^T (A A^T + eta I)^{-1} r``."""
        return self.adjoint(self.solve_gram(r, eta))

    def pseudo_inverse(self, y, eta: float = 0.0):
        """The minimum-norm (regularized) preimage of ``y``."""
        return self.back_project(y, eta)

    def _solve(self, r, eta):
        return conjugate_gradient(lambda w: self.gram(w) + eta * w, r)

    def params(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        extra = ", ".join(f"{k}={v!r}" for k, v in self.params().items() if k != "kind")
        return f"{type(self).__name__}({self.in_shape}->{self.out_shape}{', ' + extra if extra else ''})"


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, v):
        return v.copy()

    def _solve(self, r, eta):
        return r / (1.0 + eta)


class BoxDownsample(LinearOperator):
    kind = "box"

    def __init__(self, in_shape, factor: int):
        h, w = in_shape
        factor = int(factor)
        if factor < 1 or h % factor or w % factor:
            raise ShapeError(f"extent {w}x{h} is not divisible by factor {factor}")
        self.factor = factor
        super().__init__(in_shape, (h // factor, w // factor))

    def _forward(self, x):
        f = self.factor
        h, w = self.out_shape
        return x.reshape(h, f, w, f).mean(axis=(1, 3))

    def _adjoint(self, v):
        f = self.factor
        return np.repeat(np.repeat(v, f, axis=0), f, axis=1) / (f * f)

    def _solve(self, r, eta):
        diag = 1.0 / self.factor**2 + eta
        return r / diag

    def params(self):
        return {"kind": self.kind, "factor": self.factor}


def gaussian_taps(n_taps: int = 5, sigma: float = 1.0) -> np.ndarray:
    if n_taps < 1 or n_taps % 2 == 0:
        raise ValueError("number of taps must be odd and positive")
    r = np.arange(n_taps) - n_taps // 2
    taps = np.exp(-0.5 * (r / sigma) ** 2)
    return taps / taps.sum()


class GaussianBlur(LinearOperator):
    """Separable blur with periodic boundaries.

    With circular boundaries ``A`` is a 2-D circulant matrix, so ``A A^T`` is
    diagonalized by the DFT with eigenvalues ``|H(k)|^2``.
    """

    kind = "blur"

    def __init__(self, shape, taps=None, sigma: float = 1.0, n_taps: int = 5):
        super().__init__(shape, shape)
        taps = gaussian_taps(n_taps, sigma) if taps is None else np.asarray(taps, dtype=np.float64)
        if taps.ndim != 1 or len(taps) % 2 == 0:
            raise ValueError("blur taps must be a 1-D odd-length array")
        self.taps = taps
        self.sigma = sigma
        h, w = shape
        self._hy = self._transfer(h)
        self._hx = self._transfer(w)
        self._h2 = np.outer(self._hy, self._hx)

    def _transfer(self, n):
        # kernel centred at index 0 with wrap-around
        k = np.zeros(n)
        c = len(self.taps) // 2
        for i, tap in enumerate(self.taps):
            k[(i - c) % n] += tap
        return np.fft.fft(k)

    def _forward(self, x):
        return np.real(np.fft.ifft2(np.fft.fft2(x) * self._h2))

    def _adjoint(self, v):
        return np.real(np.fft.ifft2(np.fft.fft2(v) * np.conj(self._h2)))

    def _gram_spectrum(self, eta):
        spec = np.abs(self._h2) ** 2 + eta
        if np.min(spec) <= 1e-14 * np.max(spec):
            raise SingularSystemError("blur Gram matrix is singular; use eta > 0")
        return spec

    def _solve(self, r, eta):
        return np.real(np.fft.ifft2(np.fft.fft2(r) / self._gram_spectrum(eta)))

    def back_project(self, r, eta: float = 0.0):
        # one spectral multiply instead of solve-then-adjoint halves the
        # rounding, which matters when eta = 0 and |H| gets small
        if eta < 0:
            raise ValueError("eta must be >= 0")
        r = _check(r, self.out_shape, "blur back_project")
        gain = np.conj(self._h2) / self._gram_spectrum(float(eta))
        return np.real(np.fft.ifft2(np.fft.fft2(r) * gain))

    def params(self):
        return {"kind": self.kind, "taps": [float(t) for t in self.taps]}


class Composite(LinearOperator):
    """``ops[-1] @ ... @ ops[0]``: the first operator is applied first."""

    kind = "composite"

    def __init__(self, ops):
        ops = list(ops)
        if not ops:
            raise ValueError("composite needs at least one operator")
        for a, b in zip(ops, ops[1:]):
            if a.out_shape != b.in_shape:
                raise ShapeError(f"cannot chain {a!r} into {b!r}")
        self.ops = ops
        super().__init__(ops[0].in_shape, ops[-1].out_shape)

    def _forward(self, x):
        for op in self.ops:
            x = op.forward(x)
        return x

    def _adjoint(self, v):
        for op in reversed(self.ops):
            v = op.adjoint(v)
        return v

    def params(self):
        return {"kind": self.kind, "ops": [op.params() for op in self.ops]}


def conjugate_gradient(apply, b, tol: float = 1e-12, max_iter: int | None = None):
    """Solve ``apply(x) = b`` for a symmetric positive (semi)definite map."""
    b = np.asarray(b, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * b.size
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    b_norm = np.sqrt(float(np.vdot(b, b)))
    if b_norm == 0.0:
        return x
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * b_norm:
            return x
        ap = apply(p)
        pap = float(np.vdot(p, ap))
        if pap <= 0.0:
            raise SingularSystemError("Gram system is singular or indefinite; use eta > 0")
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) > 1e3 * tol * b_norm:
        raise SingularSystemError(f"conjugate gradient did not converge in {max_iter} iterations")
    return x


def dense_matrix(op: LinearOperator) -> np.ndarray:
    """Materialize ``op`` column by column. For small images only."""
    n = int(np.prod(op.in_shape))
    if n > 64 * 64:
        raise ValueError("dense materialization is limited to 64x64 inputs")
    cols = np.empty((int(np.prod(op.out_shape)), n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        cols[:, j] = op.forward(e.reshape(op.in_shape)).ravel()
        e[j] = 0.0
    return cols


def make_operator(kind: str, shape, factor: int = 2, n_taps: int = 5, sigma: float = 1.0):
    """Build an operator acting on images of ``shape`` from config fields."""
    kind = kind.lower()
    if kind == "identity":
        return Identity(shape)
    if kind == "box":
        return BoxDownsample(shape, factor)
    if kind == "blur":
        return GaussianBlur(shape, sigma=sigma, n_taps=n_taps)
    if kind == "blur+box":
        blur = GaussianBlur(shape, sigma=sigma, n_taps=n_taps)
        return Composite([blur, BoxDownsample(shape, factor)])
    raise ValueError(f"unknown operator kind {kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    gaussian_sigma: float = 0.0
    fpn_column_sigma: float = 0.0
    fpn_row_sigma: float = 0.0
    fpn_seed: int = 0

    def __post_init__(self):
        if min(self.gaussian_sigma, self.fpn_column_sigma, self.fpn_row_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")

    def fixed_pattern(self, shape) -> np.ndarray:
        """Column + row offsets; a pure function of ``(fpn_seed, shape)``."""
        h, w = shape
        rng = make_rng(self.fpn_seed)
        cols = rng.standard_normal(w) * self.fpn_column_sigma
        rows = rng.standard_normal(h) * self.fpn_row_sigma
        return cols[None, :] + rows[:, None]


def degrade(x, op: LinearOperator, noise: NoiseModel, rng) -> np.ndarray:
    """``y = A x + g + f`` with white Gaussian ``g`` and fixed-pattern ``f``."""
    y = op.forward(x)
    if noise.gaussian_sigma > 0:
        y = y + make_rng(rng).standard_normal(y.shape) * noise.gaussian_sigma
    if noise.fpn_column_sigma > 0 or noise.fpn_row_sigma > 0:
        y = y + noise.fixed_pattern(y.shape)
    return y
