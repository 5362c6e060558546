"""Image operators, synthetic test images, noise, PSNR and PGM I/O."""

from __future__ import annotations

import functools
import math
from pathlib import Path

import numpy as np
import scipy.fft

from .. import _kernels
from ..linops import LinearOp, power_iteration

__all__ = [
    "grad2d",
    "div2d",
    "grad_op",
    "grad_norm_sq",
    "gaussian_kernel",
    "gaussian_blur_op",
    "synthetic_image",
    "add_noise",
    "psnr",
    "read_pgm",
    "write_pgm",
]


def grad2d(img):
    """Forward differences with Neumann boundary, stacked as ``(D1 x, D2 x)``.

    ``D1`` differences along columns (horizontal), ``D2`` along rows
    (vertical); the last difference in each direction is zero.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError("grad2d needs a 2-D image with both sides >= 2")
    d1 = np.zeros_like(img)
    d2 = np.zeros_like(img)
    d1[:, :-1] = img[:, 1:] - img[:, :-1]
    d2[:-1, :] = img[1:, :] - img[:-1, :]
    return np.stack([d1, d2])


def div2d(field):
    """Discrete divergence, the negative adjoint of :func:`grad2d`."""
    field = np.asarray(field, dtype=float)
    if field.ndim != 3 or field.shape[0] != 2:
        raise ValueError("div2d expects an array of shape (2, n1, n2)")
    p1, p2 = field
    out = np.zeros_like(p1)
    out[:, :-1] += p1[:, :-1]
    out[:, 1:] -= p1[:, :-1]
    out[:-1, :] += p2[:-1, :]
    out[1:, :] -= p2[:-1, :]
    return out


@functools.lru_cache(maxsize=None)
def grad_op(n1: int, n2: int) -> LinearOp:
    """The gradient as a :class:`LinearOp` on flattened ``n1 x n2`` images."""
    shape = (n1, n2)
    N = n1 * n2

    def apply(x):
        return grad2d(x.reshape(shape)).ravel()

    def adjoint(v):
        return -div2d(v.reshape((2,) + shape)).ravel()

    def gram(x):
        return _kernels._grad_gram_np(x.reshape(shape)).ravel()

    op = LinearOp(apply, adjoint, N, 2 * N, gram=gram, name=f"grad{n1}x{n2}")
    op.power_method = lambda tol, max_iter, seed: _kernels.grad_norm_sq(shape, tol, max_iter, seed)
    op.image_shape = shape
    return op


@functools.lru_cache(maxsize=None)
def grad_norm_sq(n1: int, n2: int, tol: float = 1e-12) -> float:
    """Cached ``||grad||^2`` from power iteration."""
    return power_iteration(grad_op(n1, n2), tol=tol, max_iter=2_000_000)


def gaussian_kernel(size: int = 9, std: float = 4.0) -> np.ndarray:
    """Truncated normalized ``size x size`` Gaussian."""
    if size % 2 == 0 or size < 1:
        raise ValueError("kernel size must be a positive odd integer")
    if not std > 0:
        raise ValueError("std must be positive")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * std * std))
    return g / g.sum()


def gaussian_blur_op(n1: int, n2: int, size: int = 9, std: float = 4.0) -> LinearOp:
    """Circular Gaussian blur, diagonalized by the 2-D DFT.

    The returned operator carries ``normal_solve(t, w) = (Id + t R*R)^{-1} w``.
    """
    k = gaussian_kernel(size, std)
    h = size // 2
    psf = np.zeros((n1, n2))
    r = np.arange(size) - h
    # wrap the centered kernel onto the torus; small grids fold several taps together
    np.add.at(psf, (np.mod(r, n1)[:, None], np.mod(r, n2)[None, :]), k)
    H = scipy.fft.rfft2(psf)
    H2 = np.abs(H) ** 2
    shape = (n1, n2)

    def conv(x, spec):
        return scipy.fft.irfft2(spec * scipy.fft.rfft2(x.reshape(shape)), s=shape).ravel()

    Hc = np.conj(H)

    def normal_solve(t, w):
        return scipy.fft.irfft2(scipy.fft.rfft2(w.reshape(shape)) / (1.0 + t * H2), s=shape).ravel()

    op = LinearOp(lambda x: conv(x, H), lambda u: conv(u, Hc), n1 * n2, n1 * n2,
                  gram=lambda x: conv(x, H2), normal_solve=normal_solve,
                  name=f"blur{n1}x{n2}")
    op.kernel = k
    op.eigenvalues_gram = H2
    return op


def synthetic_image(n: int, seed: int = 0, n_circles: int = 6) -> np.ndarray:
    """Piecewise-constant ``n x n`` image of overlapping discs, values in ``[0, 255]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    img = np.full((n, n), float(rng.integers(0, 64)))
    for _ in range(n_circles):
        cy, cx = rng.uniform(0, n, 2)
        rad = rng.uniform(0.1, 0.35) * n
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = float(rng.integers(0, 256))
    return img


def add_noise(img, std: float = 1e-3, seed: int = 0, peak: float = 255.0) -> np.ndarray:
    """Additive Gaussian noise of ``std`` on the ``[0, 1]`` scale, returned on the ``[0, peak]`` scale."""
    rng = np.random.default_rng(seed)
    img = np.asarray(img, dtype=float)
    return img + peak * std * rng.standard_normal(img.shape)


def psnr(ref, x, peak: float = 255.0) -> float:
    ref = np.asarray(ref, dtype=float)
    x = np.asarray(x, dtype=float)
    mse = float(np.mean((ref - x) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _pgm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PGM (P2 or P5) as a float array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if not (0 < maxval < 65536) or w < 1 or h < 1:
        raise ValueError("invalid PGM header")
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos + 1)
        return raw.reshape(h, w).astype(float)
    if magic == b"P2":
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise ValueError("truncated P2 data")
        return np.array([int(v) for v in vals[: w * h]], dtype=float).reshape(h, w)
    raise ValueError(f"unsupported PGM magic {magic!r}")


def write_pgm(path, img) -> None:
    """Write a binary 8-bit PGM, rounding and clamping to ``[0, 255]``."""
    img = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("write_pgm needs a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
