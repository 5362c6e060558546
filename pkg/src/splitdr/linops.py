"""Linear operators, metrics, and the metric-monotonicity checker.

Vectors are flat 1-D float arrays throughout. Operators that act on images
reshape internally.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "LinearOp",
    "Metric",
    "ConditionReport",
    "ConvergenceWarning",
    "InvalidMetricError",
    "identity",
    "matrix_op",
    "stack",
    "adjoint_check",
    "power_iteration",
    "check_metric_condition",
    "defect_operator",
    "cocoercivity_constant",
    "block_operator_V",
]

#: above this total dimension (in + out) only the power-iteration path runs
DENSE_THRESHOLD = 4096


class ConvergenceWarning(UserWarning):
    pass


class InvalidMetricError(ValueError):
    """Raised when a metric is not symmetric positive definite."""


Array = np.ndarray
VecFn = Callable[[Array], Array]


class LinearOp:
    """Finite-dimensional linear map ``R^in_dim -> R^out_dim`` with adjoint.

    Parameters
    ----------
    apply, adjoint : callable
        Forward and adjoint actions on flat vectors.
    in_dim, out_dim : int
    dense : ndarray, optional
        Matrix representation, used by :meth:`to_dense` when given.
    gram : callable, optional
        Fast evaluation of ``L* L``; power iteration prefers it.
    scalar : float, optional
        Set when the operator is ``scalar * Id``. Lets subproblem solvers
        take closed-form shortcuts.
    normal_solve : callable, optional
        ``normal_solve(t, w)`` returns ``(Id + t L* L)^{-1} w``.
    """

    def __init__(self, apply: VecFn, adjoint: VecFn, in_dim: int, out_dim: int,
                 dense: Optional[Array] = None, gram: Optional[VecFn] = None,
                 scalar: Optional[float] = None,
                 normal_solve: Optional[Callable[[float, Array], Array]] = None,
                 name: str = "LinearOp"):
        if in_dim < 1 or out_dim < 1:
            raise ValueError("operator dimensions must be positive")
        self._apply = apply
        self._adjoint = adjoint
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self._dense = dense
        self._gram = gram
        self.scalar = scalar
        self.normal_solve = normal_solve
        self.name = name
        # optional fast ``(tol, max_iter, seed) -> (estimate, iters, converged)``
        self.power_method = None

    def __repr__(self):
        return f"<{self.name} {self.out_dim}x{self.in_dim}>"

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)

    def __call__(self, x: Array) -> Array:
        return self.apply(x)

    def apply(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.in_dim,):
            raise ValueError(f"{self.name}: expected input of size {self.in_dim}, got {x.shape}")
        return self._apply(x)

    def adjoint_apply(self, u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.out_dim,):
            raise ValueError(f"{self.name}: expected adjoint input of size {self.out_dim}, got {u.shape}")
        return self._adjoint(u)

    def gram(self, x: Array) -> Array:
        """Return ``L* L x``."""
        if self._gram is not None:
            return self._gram(np.asarray(x, dtype=float))
        return self.adjoint_apply(self.apply(x))

    @property
    def T(self) -> "LinearOp":
        dense = None if self._dense is None else self._dense.T
        return LinearOp(self._adjoint, self._apply, self.out_dim, self.in_dim,
                        dense=dense, scalar=self.scalar, name=f"{self.name}*")

    H = T

    def to_dense(self) -> Array:
        if self._dense is not None:
            return np.asarray(self._dense, dtype=float)
        cols = [self._apply(e) for e in np.eye(self.in_dim)]
        return np.array(cols).T.reshape(self.out_dim, self.in_dim)

    def __matmul__(self, other: "LinearOp") -> "LinearOp":
        if not isinstance(other, LinearOp):
            return NotImplemented
        if other.out_dim != self.in_dim:
            raise ValueError(f"cannot compose {self!r} with {other!r}")
        a, b = self, other
        dense = None
        if a._dense is not None and b._dense is not None:
            dense = a._dense @ b._dense
        scalar = a.scalar * b.scalar if a.scalar is not None and b.scalar is not None else None
        gram = None
        if a.scalar is not None and b._gram is not None:
            s2 = a.scalar ** 2
            gram = lambda x: s2 * b._gram(x)
        elif b.scalar is not None and a._gram is not None:
            s = b.scalar
            gram = lambda x: s * s * a._gram(x)
        return LinearOp(lambda x: a._apply(b._apply(x)),
                        lambda u: b._adjoint(a._adjoint(u)),
                        b.in_dim, a.out_dim, dense=dense, gram=gram, scalar=scalar,
                        name=f"({a.name}@{b.name})")

    def __mul__(self, c: float) -> "LinearOp":
        c = float(c)
        dense = None if self._dense is None else c * self._dense
        gram = None
        if self._gram is not None:
            g = self._gram
            gram = lambda x: c * c * g(x)
        ns = None
        if self.normal_solve is not None:
            base = self.normal_solve
            ns = lambda t, w: base(t * c * c, w)
        return LinearOp(lambda x: c * self._apply(x), lambda u: c * self._adjoint(u),
                        self.in_dim, self.out_dim, dense=dense, gram=gram,
                        scalar=None if self.scalar is None else c * self.scalar,
                        normal_solve=ns, name=f"{c:g}*{self.name}")

    __rmul__ = __mul__

    def __neg__(self) -> "LinearOp":
        return self * -1.0


def identity(n: int, scale: float = 1.0) -> LinearOp:
    s = float(scale)

    def normal_solve(t, w):
        return w / (1.0 + t * s * s)

    return LinearOp(lambda x: s * x, lambda u: s * u, n, n, gram=lambda x: s * s * x,
                    scalar=s, normal_solve=normal_solve,
                    name="Id" if s == 1.0 else f"{s:g}Id")


def matrix_op(A, name: str = "Matrix") -> LinearOp:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return LinearOp(lambda x: A @ x, lambda u: A.T @ u, A.shape[1], A.shape[0],
                    dense=A, name=name)


def stack(ops: Sequence[LinearOp]) -> LinearOp:
    """Vertical stack ``x -> (L_1 x, ..., L_m x)`` onto the product space."""
    ops = list(ops)
    n = ops[0].in_dim
    if any(op.in_dim != n for op in ops):
        raise ValueError("stacked operators must share the input space")
    splits = np.cumsum([op.out_dim for op in ops])[:-1]

    def apply(x):
        return np.concatenate([op._apply(x) for op in ops])

    def adjoint(u):
        parts = np.split(u, splits)
        out = ops[0]._adjoint(parts[0])
        for op, part in zip(ops[1:], parts[1:]):
            out = out + op._adjoint(part)
        return out

    gram = None
    if all(op._gram is not None for op in ops):
        def gram(x):
            out = ops[0]._gram(x)
            for op in ops[1:]:
                out = out + op._gram(x)
            return out

    dense = None
    if all(op._dense is not None for op in ops):
        dense = np.vstack([op._dense for op in ops])
    return LinearOp(apply, adjoint, n, int(sum(op.out_dim for op in ops)), dense=dense,
                    gram=gram, name="[" + ";".join(op.name for op in ops) + "]")


class Metric:
    """Self-adjoint strongly monotone linear operator.

    Build with :meth:`scalar`, :meth:`diagonal`, :meth:`dense` or
    :meth:`block`; the constructors validate positive definiteness.
    """

    def __init__(self, op: LinearOp, solve: VecFn, strong_monotonicity: float,
                 sqrt_apply: Optional[VecFn] = None, *, diag: Optional[Array] = None,
                 scalar: Optional[float] = None, dense: Optional[Array] = None,
                 blocks: Optional[list] = None):
        if op.in_dim != op.out_dim:
            raise InvalidMetricError("a metric must be square")
        if not strong_monotonicity > 0:
            raise InvalidMetricError("a metric must be strongly monotone")
        self.op = op
        self._solve = solve
        self.sqrt_apply = sqrt_apply
        self.strong_monotonicity = float(strong_monotonicity)
        self.diag = diag
        self.scalar = scalar
        self._dense = dense
        self.blocks = blocks
        self._inverse: Optional[Metric] = None

    @property
    def dim(self) -> int:
        return self.op.in_dim

    def __repr__(self):
        if self.scalar is not None:
            return f"Metric({self.scalar:g}*Id_{self.dim})"
        return f"Metric(dim={self.dim})"

    def __call__(self, x: Array) -> Array:
        return self.op.apply(x)

    def solve(self, x: Array) -> Array:
        return self._solve(np.asarray(x, dtype=float))

    @classmethod
    def scalar(cls, tau: float, dim: int) -> "Metric":
        tau = float(tau)
        if not (np.isfinite(tau) and tau > 0):
            raise InvalidMetricError(f"scalar metric needs tau > 0, got {tau}")
        st = np.sqrt(tau)
        return cls(identity(dim, tau), lambda x: x / tau, tau, lambda x: st * x,
                   diag=np.full(dim, tau), scalar=tau)

    @classmethod
    def diagonal(cls, d) -> "Metric":
        d = np.asarray(d, dtype=float).ravel()
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise InvalidMetricError("diagonal metric entries must be positive")
        if np.all(d == d[0]):
            return cls.scalar(d[0], d.size)
        sd = np.sqrt(d)
        op = LinearOp(lambda x: d * x, lambda x: d * x, d.size, d.size,
                      gram=lambda x: d * d * x, name="Diag")
        return cls(op, lambda x: x / d, d.min(), lambda x: sd * x, diag=d)

    @classmethod
    def dense(cls, S) -> "Metric":
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise InvalidMetricError("metric matrix must be square")
        if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise InvalidMetricError("metric matrix must be symmetric")
        S = 0.5 * (S + S.T)
        try:
            factor = scipy.linalg.cho_factor(S)
        except np.linalg.LinAlgError as exc:
            raise InvalidMetricError(f"metric is not positive definite: {exc}") from None
        w, V = np.linalg.eigh(S)
        root = (V * np.sqrt(w)) @ V.T
        op = matrix_op(S, name="Metric")
        return cls(op, lambda x: scipy.linalg.cho_solve(factor, x), w.min(),
                   lambda x: root @ x, dense=S)

    @classmethod
    def block(cls, metrics: Sequence["Metric"]) -> "Metric":
        """Block-diagonal metric on a product space."""
        metrics = list(metrics)
        if all(m.diag is not None for m in metrics):
            return cls.diagonal(np.concatenate([m.diag for m in metrics]))
        splits = np.cumsum([m.dim for m in metrics])[:-1]

        def blockwise(fn_name):
            def fn(x):
                return np.concatenate([getattr(m, fn_name)(p) for m, p in zip(metrics, np.split(x, splits))])
            return fn

        n = int(sum(m.dim for m in metrics))
        apply = blockwise("__call__")
        op = LinearOp(apply, apply, n, n, name="BlockMetric")
        sqrt = None
        if all(m.sqrt_apply is not None for m in metrics):
            def sqrt(x):
                return np.concatenate([m.sqrt_apply(p) for m, p in zip(metrics, np.split(x, splits))])
        return cls(op, blockwise("solve"), min(m.strong_monotonicity for m in metrics),
                   sqrt, blocks=metrics)

    def inverse(self) -> "Metric":
        if self._inverse is None:
            if self.scalar is not None:
                inv = Metric.scalar(1.0 / self.scalar, self.dim)
            elif self.diag is not None:
                inv = Metric.diagonal(1.0 / self.diag)
            elif self.blocks is not None:
                inv = Metric.block([m.inverse() for m in self.blocks])
            else:
                inv = Metric.dense(np.linalg.inv(self.to_dense()))
            inv._inverse = self
            self._inverse = inv
        return self._inverse

    def scaled(self, c: float) -> "Metric":
        """Return ``c * self`` for ``c > 0``."""
        c = float(c)
        if self.scalar is not None:
            return Metric.scalar(c * self.scalar, self.dim)
        if self.diag is not None:
            return Metric.diagonal(c * self.diag)
        return Metric.dense(c * self.to_dense())

    def to_dense(self) -> Array:
        if self._dense is not None:
            return self._dense
        if self.diag is not None:
            return np.diag(self.diag)
        return self.op.to_dense()

    def sqrt(self) -> LinearOp:
        """Symmetric square root as a linear operator."""
        if self.scalar is not None:
            return identity(self.dim, np.sqrt(self.scalar))
        if self.diag is not None:
            sd = np.sqrt(self.diag)
            return LinearOp(lambda x: sd * x, lambda x: sd * x, self.dim, self.dim,
                            name="sqrtDiag")
        if self.sqrt_apply is None:
            w, V = np.linalg.eigh(self.to_dense())
            root = (V * np.sqrt(w)) @ V.T
            return matrix_op(root, name="sqrtMetric")
        f = self.sqrt_apply
        return LinearOp(f, f, self.dim, self.dim, name="sqrtMetric")

    def norm_sq(self, x: Array) -> float:
        """``||x||^2`` in this metric, i.e. ``<x, M x>``."""
        return float(np.dot(x, self(x)))


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of :func:`check_metric_condition`.

    ``margin`` is the smallest eigenvalue of the normalized defect
    ``Id - Y^{1/2} L* S L Y^{1/2}`` (dense path) or ``1 - ||S^{1/2} L Y^{1/2}||^2``
    (power path). Both are the same number and its sign decides monotonicity
    of ``Y^{-1} - L* S L``.
    """

    is_monotone: bool
    margin: float
    method: str
    defect_min_eig: Optional[float] = None


def adjoint_check(op: LinearOp, trials: int = 10, seed: int = 0) -> float:
    """Largest relative defect of ``<Lx, u> = <x, L*u>`` over random pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.in_dim)
        u = rng.standard_normal(op.out_dim)
        Lx = op.apply(x)
        Lsu = op.adjoint_apply(u)
        if Lx.shape != (op.out_dim,) or Lsu.shape != (op.in_dim,):
            raise ValueError(f"{op.name}: apply/adjoint output dimensions are inconsistent")
        lhs = float(np.dot(Lx, u))
        rhs = float(np.dot(x, Lsu))
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return worst


def power_iteration(op: LinearOp, tol: float = 1e-9, max_iter: int = 100_000,
                    seed: int = 0) -> float:
    """Estimate ``||L||^2`` by power iteration on ``L* L``.

    Starts from a seeded uniform vector, normalizes each step, and stops when
    successive Rayleigh quotients differ by less than ``tol`` relative to the
    current one. If ``max_iter`` is exhausted the best estimate is returned
    and a :class:`ConvergenceWarning` is issued.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if op.power_method is not None:
        lam, _, ok = op.power_method(tol, max_iter, seed)
        if not ok:
            warnings.warn(f"power iteration did not reach tol={tol:g} in {max_iter} iterations",
                          ConvergenceWarning, stacklevel=2)
        return lam
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=op.in_dim)
    x /= np.linalg.norm(x)
    prev = None
    best = 0.0
    for _ in range(max_iter):
        y = op.gram(x)
        lam = float(np.dot(x, y))
        best = max(best, lam)
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return lam
        prev = lam
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    warnings.warn(f"power iteration did not reach tol={tol:g} in {max_iter} iterations",
                  ConvergenceWarning, stacklevel=2)
    return best


def _check_dims(Y: Metric, S: Metric, L: LinearOp):
    if Y.dim != L.in_dim or S.dim != L.out_dim:
        raise ValueError(f"metric dimensions ({Y.dim}, {S.dim}) do not match {L!r}")


def defect_operator(Y: Metric, S: Metric, L: LinearOp) -> Array:
    """Dense ``Y^{-1} - L* S L``."""
    _check_dims(Y, S, L)
    Ld = L.to_dense()
    U = Y.inverse().to_dense() - Ld.T @ S.to_dense() @ Ld
    return 0.5 * (U + U.T)


def check_metric_condition(Y: Metric, S: Metric, L: LinearOp, tol: float = 1e-8,
                           method: Optional[str] = None, seed: int = 0) -> ConditionReport:
    """Decide whether ``Y^{-1} - L* S L`` is monotone.

    Small problems (``in_dim + out_dim <= 4096``) are decided by a dense
    eigendecomposition, larger ones by power iteration on
    ``S^{1/2} L Y^{1/2}``. ``method`` forces ``"dense_eigen"`` or
    ``"power_iteration"``.
    """
    _check_dims(Y, S, L)
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    if method is None:
        method = "dense_eigen" if L.in_dim + L.out_dim <= DENSE_THRESHOLD else "power_iteration"
    if method == "dense_eigen":
        for M in (Y, S):
            if M.diag is None:
                try:
                    np.linalg.cholesky(M.to_dense())
                except np.linalg.LinAlgError:
                    raise InvalidMetricError("metric is not positive definite") from None
        U = defect_operator(Y, S, L)
        Yh = Y.sqrt().to_dense()
        normalized = Yh @ U @ Yh
        margin = float(np.linalg.eigvalsh(0.5 * (normalized + normalized.T))[0])
        raw = float(np.linalg.eigvalsh(U)[0])
        return ConditionReport(margin >= -tol, margin, "dense_eigen", raw)
    if method == "power_iteration":
        composite = S.sqrt() @ L @ Y.sqrt()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            nrm = power_iteration(composite, tol=1e-12, max_iter=50_000, seed=seed)
        margin = 1.0 - nrm
        return ConditionReport(margin >= -tol, margin, "power_iteration")
    raise ValueError(f"unknown method {method!r}")


def cocoercivity_constant(Y: Metric, S: Metric) -> float:
    """``tau*sigma/(tau+sigma)`` from the strong monotonicity constants."""
    tau, sigma = Y.strong_monotonicity, S.strong_monotonicity
    if tau <= 0 or sigma <= 0:
        raise ValueError("strong monotonicity constants must be positive")
    return tau * sigma / (tau + sigma)


def block_operator_V(Y: Metric, S: Metric, L: LinearOp) -> Array:
    """Dense ``V: (x, u) -> (Y^{-1} x - L* u, S^{-1} u - L x)``."""
    _check_dims(Y, S, L)
    Ld = L.to_dense()
    return np.block([[Y.inverse().to_dense(), -Ld.T], [-Ld, S.inverse().to_dense()]])
