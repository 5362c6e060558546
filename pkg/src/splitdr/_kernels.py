"""Compiled kernels for the Neumann-boundary image gradient.

numba is used when available; pure numpy fallbacks keep the package usable
without it.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _grad_gram_np(x):
    """``D1*D1 x + D2*D2 x`` (negative Neumann Laplacian) in numpy."""
    out = np.zeros_like(x)
    d = np.diff(x, axis=0)
    out[:-1] -= d
    out[1:] += d
    d = np.diff(x, axis=1)
    out[:, :-1] -= d
    out[:, 1:] += d
    return out


def _gram_power_step_np(x, s, out):
    out[...] = _grad_gram_np(x) * s
    return float(np.sum(x * out)) * s, float(np.sum(out * out))


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=True)
    def _gram_power_step_nb(x, s, out):
        n1, n2 = x.shape
        rq = 0.0
        nn = 0.0
        for i in range(n1):
            for j in range(n2):
                xi = x[i, j]
                c = 4.0
                acc = 0.0
                if i > 0:
                    acc += x[i - 1, j]
                else:
                    c -= 1.0
                if i < n1 - 1:
                    acc += x[i + 1, j]
                else:
                    c -= 1.0
                if j > 0:
                    acc += x[i, j - 1]
                else:
                    c -= 1.0
                if j < n2 - 1:
                    acc += x[i, j + 1]
                else:
                    c -= 1.0
                t = (c * xi - acc) * s
                out[i, j] = t
                rq += xi * t
                nn += t * t
        return rq * s, nn

    gram_power_step = _gram_power_step_nb
else:  # pragma: no cover
    gram_power_step = _gram_power_step_np


def grad_norm_sq(shape, tol=1e-9, max_iter=200_000, seed=0):
    """Power iteration for ``||grad||^2`` on a grid of ``shape``.

    Same stopping rule as :func:`splitdr.linops.power_iteration` but runs the
    fused Laplacian/Rayleigh kernel and rescales lazily instead of
    renormalizing each step.

    Returns
    -------
    (estimate, iterations, converged)
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=shape)
    x /= np.linalg.norm(x)
    out = np.empty_like(x)
    s = 1.0
    prev = None
    lam = 0.0
    for k in range(1, max_iter + 1):
        lam, nn = gram_power_step(x, s, out)
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return lam, k, True
        prev = lam
        if nn == 0.0:
            return 0.0, k, True
        x, out = out, x
        s = 1.0 / np.sqrt(nn)
    return lam, max_iter, False
