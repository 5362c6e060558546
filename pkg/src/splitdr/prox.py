"""Proximity operators and metric resolvents.

Conventions
-----------
``op.resolvent(M, w)`` returns ``J_{M A}(w) = (Id + M A)^{-1} w`` for a
metric ``M``. For ``A = df`` this is the minimizer of
``f(y) + 1/2 ||y - w||^2_{M^{-1}}``, so

    metric_prox(f, Y, w) = argmin f(y) + 1/2 ||y - w||^2_Y = f.resolvent(Y^{-1}, w)

and ``prox^{tau Id}_f = prox_{f/tau}``: the metric weights the quadratic.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .linops import LinearOp, Metric

__all__ = [
    "ResolventOp",
    "Zero",
    "L1Norm",
    "Box",
    "Huber",
    "Quadratic",
    "LinearMonotone",
    "Custom",
    "Inverse",
    "DualComposite",
    "SubproblemError",
    "soft_threshold",
    "project_box",
    "prox_huber",
    "huber_value",
    "huber_grad",
    "resolvent_quadratic",
    "conjugate_resolvent",
    "metric_prox",
    "solve_composite",
]

Array = np.ndarray


class SubproblemError(RuntimeError):
    """Inner solver failed to reach its tolerance."""

    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


# closed-form scalar maps -------------------------------------------------

def soft_threshold(x, level):
    """Componentwise ``sign(x) * max(|x| - level, 0)``."""
    level = np.asarray(level, dtype=float)
    if np.any(level < 0):
        raise ValueError("threshold level must be nonnegative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - level, 0.0)


def project_box(x, lo, hi):
    """Componentwise clamp onto ``[lo, hi]``."""
    if lo > hi:
        raise ValueError(f"empty box: lo={lo} > hi={hi}")
    return np.clip(np.asarray(x, dtype=float), lo, hi)


def huber_value(x, delta, shift=0.0):
    """``sum phi(x - shift)`` with ``phi(t) = |t| - delta/2`` beyond ``delta``, else ``t^2/(2 delta)``."""
    t = np.abs(np.asarray(x, dtype=float) - shift)
    return float(np.sum(np.where(t > delta, t - 0.5 * delta, t * t / (2.0 * delta))))


def huber_grad(x, delta, shift=0.0):
    return np.clip((np.asarray(x, dtype=float) - shift) / delta, -1.0, 1.0)


def prox_huber(x, gamma, delta, shift=0.0):
    """Prox of ``gamma * phi(. - shift)``, componentwise; ``gamma`` may be an array."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0) or not delta > 0:
        raise ValueError("prox_huber needs gamma > 0 and delta > 0")
    w = np.asarray(x, dtype=float) - shift
    inner = np.abs(w) <= delta + gamma
    out = np.where(inner, w * delta / (delta + gamma), w - gamma * np.sign(w))
    return shift + out


_normal_cache: dict = {}


def resolvent_quadratic(R: LinearOp, b, tau: float, w, Rtb=None):
    """``argmin_y 1/2||Ry - b||^2 + 1/(2 tau)||y - w||^2 = (Id + tau R*R)^{-1}(w + tau R* b)``.

    ``Rtb`` may carry a precomputed ``R* b``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if Rtb is None:
        Rtb = R.adjoint_apply(np.asarray(b, dtype=float))
    rhs = np.asarray(w, dtype=float) + tau * Rtb
    if R.normal_solve is not None:
        return R.normal_solve(tau, rhs)
    key = (id(R), float(tau))
    entry = _normal_cache.get(key)
    if entry is None or entry[1] is not R:
        Rd = R.to_dense()
        try:
            fac = scipy.linalg.cho_factor(np.eye(R.in_dim) + tau * Rd.T @ Rd)
        except np.linalg.LinAlgError as exc:
            raise SubproblemError(f"normal-equation factorization failed: {exc}") from None
        if len(_normal_cache) > 64:
            _normal_cache.clear()
        # holding R keeps its id() from being reused
        entry = _normal_cache[key] = (fac, R)
    return scipy.linalg.cho_solve(entry[0], rhs)


# resolvent operators ------------------------------------------------------

def _diag_of(metric: Metric, what: str):
    if metric.diag is None:
        raise NotImplementedError(f"{what}: resolvent only available for scalar or diagonal metrics")
    return metric.diag


class ResolventOp:
    """Maximally monotone operator accessed through its metric resolvent.

    Subclasses implement :meth:`resolvent`. Smooth ones also expose
    ``value``, ``gradient`` and ``hessian``.
    """

    kind = "custom"
    smooth = False

    def resolvent(self, metric: Metric, w: Array) -> Array:
        raise NotImplementedError

    def prox(self, metric: Metric, w: Array) -> Array:
        """``argmin f(y) + 1/2||y - w||^2_metric``."""
        return self.resolvent(metric.inverse(), w)

    def inverse(self) -> "ResolventOp":
        return Inverse(self)

    def value(self, x: Array) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no function value")

    def __repr__(self):
        return f"{type(self).__name__}()"


class Zero(ResolventOp):
    kind = "zero"
    smooth = True

    def resolvent(self, metric, w):
        return np.array(w, dtype=float)

    def value(self, x):
        return 0.0

    def gradient(self, x):
        return np.zeros_like(x)

    def hessian(self, x):
        return np.zeros((x.size, x.size))


class L1Norm(ResolventOp):
    """``alpha * ||x||_1``."""

    kind = "l1"

    def __init__(self, alpha: float = 1.0):
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.alpha = float(alpha)

    def resolvent(self, metric, w):
        return soft_threshold(w, self.alpha * _diag_of(metric, "l1"))

    def value(self, x):
        return self.alpha * float(np.sum(np.abs(x)))

    def subdiff_interval(self, x):
        a = self.alpha
        s = np.sign(x)
        return np.where(x == 0, -a, a * s), np.where(x == 0, a, a * s)

    def __repr__(self):
        return f"L1Norm(alpha={self.alpha:g})"


class Box(ResolventOp):
    """Indicator of ``[lo, hi]^n``."""

    kind = "box"

    def __init__(self, lo: float = 0.0, hi: float = 255.0):
        if lo > hi:
            raise ValueError("lo must not exceed hi")
        self.lo, self.hi = float(lo), float(hi)

    def resolvent(self, metric, w):
        _diag_of(metric, "box")
        return project_box(w, self.lo, self.hi)

    def value(self, x):
        return 0.0 if np.all((x >= self.lo) & (x <= self.hi)) else np.inf

    def __repr__(self):
        return f"Box({self.lo:g}, {self.hi:g})"


class Huber(ResolventOp):
    """``scale * sum phi_delta(x - shift)``."""

    kind = "huber"
    smooth = True

    def __init__(self, delta: float = 1.0, shift=0.0, scale: float = 1.0):
        if not delta > 0 or not scale > 0:
            raise ValueError("delta and scale must be positive")
        self.delta = float(delta)
        self.shift = shift if np.isscalar(shift) else np.asarray(shift, dtype=float)
        self.scale = float(scale)

    def resolvent(self, metric, w):
        return prox_huber(w, self.scale * _diag_of(metric, "huber"), self.delta, self.shift)

    def value(self, x):
        return self.scale * huber_value(x, self.delta, self.shift)

    def gradient(self, x):
        return self.scale * huber_grad(x, self.delta, self.shift)

    def hessian_diag(self, x):
        t = np.abs(np.asarray(x, dtype=float) - self.shift)
        return np.where(t < self.delta, self.scale / self.delta, 0.0)

    def hessian(self, x):
        return np.diag(self.hessian_diag(x))

    def __repr__(self):
        return f"Huber(delta={self.delta:g}, scale={self.scale:g})"


class Quadratic(ResolventOp):
    """``1/2 ||R x - b||^2``."""

    kind = "quadratic"
    smooth = True

    def __init__(self, R: LinearOp, b):
        self.R = R
        self.b = np.asarray(b, dtype=float)
        if self.b.shape != (R.out_dim,):
            raise ValueError("b must live in the range space of R")
        self._dense = None
        self.Rtb = R.adjoint_apply(self.b)

    def _Rd(self):
        if self._dense is None:
            self._dense = self.R.to_dense()
        return self._dense

    def resolvent(self, metric, w):
        if metric.scalar is not None:
            return resolvent_quadratic(self.R, self.b, metric.scalar, w, self.Rtb)
        Rd = self._Rd()
        Md = metric.to_dense()
        rhs = np.asarray(w, dtype=float) + Md @ self.Rtb
        try:
            return np.linalg.solve(np.eye(Rd.shape[1]) + Md @ (Rd.T @ Rd), rhs)
        except np.linalg.LinAlgError as exc:
            raise SubproblemError(f"quadratic resolvent failed: {exc}") from None

    def value(self, x):
        r = self.R.apply(x) - self.b
        return 0.5 * float(r @ r)

    def gradient(self, x):
        return self.R.adjoint_apply(self.R.apply(x) - self.b)

    def hessian(self, x):
        Rd = self._Rd()
        return Rd.T @ Rd


class LinearMonotone(ResolventOp):
    """Monotone linear operator ``x -> S x + c`` given by a matrix."""

    kind = "linear"

    def __init__(self, S, c=None):
        self.S = np.atleast_2d(np.asarray(S, dtype=float))
        sym = 0.5 * (self.S + self.S.T)
        if np.linalg.eigvalsh(sym)[0] < -1e-10 * max(1.0, np.abs(sym).max()):
            raise ValueError("matrix is not monotone")
        self.c = np.zeros(self.S.shape[0]) if c is None else np.asarray(c, dtype=float)

    def resolvent(self, metric, w):
        Md = metric.to_dense()
        n = self.S.shape[0]
        return np.linalg.solve(np.eye(n) + Md @ self.S, np.asarray(w, dtype=float) - Md @ self.c)

    def apply(self, x):
        return self.S @ x + self.c


class Custom(ResolventOp):
    """User-supplied resolvent.

    ``metric_aware=True``: ``fn(metric, w)`` returns ``J_{metric A}(w)``.
    Otherwise ``fn(t, w)`` returns ``J_{t A}(w)`` and only scalar metrics
    are accepted.
    """

    def __init__(self, fn: Callable, metric_aware: bool = False, value: Optional[Callable] = None):
        self.fn = fn
        self.metric_aware = metric_aware
        self._value = value

    def resolvent(self, metric, w):
        if self.metric_aware:
            return self.fn(metric, w)
        if metric.scalar is None:
            raise NotImplementedError("custom resolvent is not metric-aware; use a scalar metric")
        return self.fn(metric.scalar, w)

    def value(self, x):
        if self._value is None:
            return super().value(x)
        return self._value(x)


class Inverse(ResolventOp):
    """``A^{-1}`` through ``J_{M A^{-1}}(w) = w - M J_{M^{-1} A}(M^{-1} w)``."""

    kind = "inverse"

    def __init__(self, base: ResolventOp):
        self.base = base

    def resolvent(self, metric, w):
        w = np.asarray(w, dtype=float)
        return w - metric(self.base.resolvent(metric.inverse(), metric.solve(w)))

    def inverse(self):
        return self.base

    def __repr__(self):
        return f"Inverse({self.base!r})"


def conjugate_resolvent(prox_g: ResolventOp, tau, x):
    """``J_{tau B^{-1}}(x) = tau (x/tau - prox_{g/tau}(x/tau))`` for ``B = dg``.

    ``tau`` may be a positive scalar or a :class:`Metric`.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(tau, Metric):
        return Inverse(prox_g).resolvent(tau, x)
    tau = float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    y = x / tau
    return tau * (y - prox_g.resolvent(Metric.scalar(1.0 / tau, x.size), y))


def metric_prox(f: ResolventOp, metric: Metric, w):
    """``argmin_y f(y) + 1/2 ||w - y||^2_metric``."""
    return f.prox(metric, np.asarray(w, dtype=float))


# composite subproblem -----------------------------------------------------

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


def solve_composite(g: ResolventOp, T: LinearOp, W: Metric, c, p0=None,
                    tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    """``argmin_p g(p) + 1/2 ||T p - c||^2_W``.

    ``T = t Id`` reduces to a prox of ``g``. Otherwise ``g`` must be smooth
    and a damped semismooth Newton method runs on the optimality equation
    ``grad g(p) + T* W (T p - c) = 0``.

    Returns
    -------
    (p, newton_iterations)
    """
    c = np.asarray(c, dtype=float)
    if T.scalar is not None:
        t = T.scalar
        if t == 0:
            raise SubproblemError("T = 0 makes the subproblem ill-posed")
        return g.resolvent(W.scaled(t * t).inverse(), c / t), 0
    if not g.smooth:
        raise NotImplementedError(
            f"{g!r}: nonsmooth g with a general T needs a closed-form resolvent")
    Td = T.to_dense()
    Wd = W.to_dense()
    TWT = Td.T @ Wd @ Td
    TWc = Td.T @ (Wd @ c)
    p = np.zeros(T.in_dim) if p0 is None else np.array(p0, dtype=float)

    def objective(q):
        r = Td @ q - c
        return g.value(q) + 0.5 * float(r @ (Wd @ r))

    def residual(q):
        return g.gradient(q) + TWT @ q - TWc

    scale = max(1.0, float(np.linalg.norm(TWc)))
    r = residual(p)
    nr = float(np.linalg.norm(r))
    if nr <= tol * scale:
        return p, 0
    F = objective(p)
    for k in range(1, max_iter + 1):
        H = g.hessian(p) + TWT
        try:
            step = -scipy.linalg.solve(H, r, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = -np.linalg.lstsq(H, r, rcond=None)[0]
        slope = float(r @ step)
        t = 1.0
        while True:
            q = p + t * step
            Fq = objective(q)
            if Fq <= F + 1e-4 * t * slope + 1e-15 * abs(F) or t < 1e-10:
                break
            t *= 0.5
        small_step = np.linalg.norm(q - p) <= 1e-15 * max(1.0, float(np.linalg.norm(p)))
        p, F = q, Fq
        r = residual(p)
        nr = float(np.linalg.norm(r))
        if nr <= tol * scale or small_step:
            return p, k
    raise SubproblemError(
        f"semismooth Newton stopped after {max_iter} iterations with residual {nr:.3e}",
        iterations=max_iter, residual=nr)


class DualComposite(ResolventOp):
    """``B = d(g* o (-T*))``, resolved through a primal subproblem in ``g``.

    ``J_{M B}(w) = w + M T p`` with ``p = argmin g + 1/2 ||T p + M^{-1} w||^2_M``.
    The last ``p`` is kept in ``self.last_p`` (warm start and recovery).
    """

    kind = "dual_composite"

    def __init__(self, g: ResolventOp, T: LinearOp):
        self.g = g
        self.T = T
        self.last_p = None
        self.inner_iterations = 0

    def resolvent(self, metric, w):
        w = np.asarray(w, dtype=float)
        p, it = solve_composite(self.g, self.T, metric, -metric.solve(w), p0=self.last_p)
        self.last_p = p
        self.inner_iterations += it
        return w + metric(self.T.apply(p))
