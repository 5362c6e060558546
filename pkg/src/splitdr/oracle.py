"""Reference solvers and optimality certificates.

Problems have the form ``F(x) = s(x) + sum_i g_i(L_i x)`` with a smooth
``s`` (:class:`~splitdr.prox.Zero`, :class:`~splitdr.prox.Quadratic` or
:class:`~splitdr.prox.Huber`) and separable nonsmooth ``g_i``
(:class:`~splitdr.prox.L1Norm`, :class:`~splitdr.prox.Box` or ``Zero``).
Every oracle answer is certified by :func:`subgradient_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import lsq_linear

from .linops import Metric, matrix_op, power_iteration
from .prox import Box, Huber, L1Norm, Quadratic, ResolventOp, Zero

__all__ = [
    "CertificationError",
    "Term",
    "CompositeProblem",
    "OracleConfig",
    "scalar_lasso_problem",
    "quadratic_problem",
    "huber_l1_problem",
    "oracle_solve",
    "proximal_gradient",
    "dense_kkt",
    "subgradient_check",
    "finite_difference_check",
    "improvement_pct",
]

METHODS = ("dense_kkt", "proximal_gradient")


class CertificationError(RuntimeError):
    """The candidate failed the subgradient certificate."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass
class Term:
    """``g(L x)``; ``L = None`` is the identity."""

    g: ResolventOp
    L: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.g, (L1Norm, Box, Zero)):
            raise TypeError(f"unsupported nonsmooth term {self.g!r}")
        if self.L is not None:
            self.L = np.atleast_2d(np.asarray(self.L, dtype=float))

    def matrix(self, n: int) -> np.ndarray:
        return np.eye(n) if self.L is None else self.L

    def apply(self, x):
        return x if self.L is None else self.L @ x


@dataclass
class CompositeProblem:
    """``smooth(x) + sum_i terms[i].g(terms[i].L x)`` on ``R^dim``."""

    smooth: ResolventOp
    terms: List[Term] = field(default_factory=list)
    dim: int = 1

    def __post_init__(self):
        if not isinstance(self.smooth, (Zero, Quadratic, Huber)):
            raise TypeError(f"unsupported smooth part {self.smooth!r}")
        for t in self.terms:
            if t.L is not None and t.L.shape[1] != self.dim:
                raise ValueError("term operator does not act on R^dim")

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.smooth.value(x)) + sum(float(t.g.value(t.apply(x))) for t in self.terms)

    def gradient(self, x):
        return self.smooth.gradient(np.asarray(x, dtype=float))


@dataclass
class OracleConfig:
    method: str = "proximal_gradient"
    tol: float = 1e-12
    max_iter: int = 1_000_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


def scalar_lasso_problem() -> CompositeProblem:
    """``|x| + 1/2 (x - 1)^2``; minimizer ``0``, value ``1/2``."""
    return CompositeProblem(Quadratic(matrix_op([[1.0]]), [1.0]), [Term(L1Norm(1.0))], 1)


def quadratic_problem(R, b) -> CompositeProblem:
    """``1/2 ||R x - b||^2`` with a dense ``R``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return CompositeProblem(Quadratic(matrix_op(R), b), [], R.shape[1])


def huber_l1_problem(M, z, alpha: float, delta: float) -> CompositeProblem:
    """``h_delta(x - z) + alpha ||M x||_1``."""
    M = np.asarray(M, dtype=float)
    return CompositeProblem(Huber(delta, np.asarray(z, dtype=float)), [Term(L1Norm(alpha), M)],
                            M.shape[1])


def _lipschitz(s: ResolventOp) -> float:
    if isinstance(s, Huber):
        return s.scale / s.delta
    if isinstance(s, Quadratic):
        return power_iteration(s.R, tol=1e-10, seed=0)
    return 0.0


def proximal_gradient(problem: CompositeProblem, tol: float = 1e-12, max_iter: int = 1_000_000,
                      x0=None):
    """Accelerated forward-backward with adaptive restart.

    At most one nonsmooth term, whose operator must be square and
    invertible; the iteration then runs in ``w = L x`` with step
    ``1 / Lip``. Stops when the gradient mapping, pulled back to ``x``
    through ``||L||``, is at most ``tol max(1, ||grad s(x)||)``.

    Returns
    -------
    x, iterations, converged
    """
    n = problem.dim
    terms = problem.terms
    if len(terms) > 1:
        raise ValueError("proximal_gradient handles at most one nonsmooth term")
    g = terms[0].g if terms else Zero()
    L = terms[0].L if terms else None
    lip = _lipschitz(problem.smooth)
    if L is None:
        to_x = lambda w: w
        pull = lambda gx: gx
        norm_L = 1.0
    else:
        if L.shape != (n, n):
            raise ValueError("term operator must be square")
        sv = np.linalg.svd(L, compute_uv=False)
        if sv.min() <= 1e-14 * max(1.0, float(sv.max())):
            raise ValueError("term operator must be invertible")
        lu = scipy.linalg.lu_factor(L)
        to_x = lambda w: scipy.linalg.lu_solve(lu, w)
        pull = lambda gx: scipy.linalg.lu_solve(lu, gx, trans=1)
        norm_L = float(sv.max())
        lip /= float(sv.min()) ** 2
    step = 1.0 / lip if lip > 0 else 1.0
    metric = Metric.scalar(step, n)
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    w = x0 if L is None else L @ x0
    y, t = w.copy(), 1.0
    for k in range(1, max_iter + 1):
        gx = problem.gradient(to_x(y))
        w_new = g.resolvent(metric, y - step * pull(gx))
        d = w_new - y
        if norm_L * float(np.linalg.norm(d)) / step <= tol * max(1.0, float(np.linalg.norm(gx))):
            return to_x(w_new), k, True
        if float(d @ (w_new - w)) > 0:
            y, t = w_new.copy(), 1.0
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = w_new + ((t - 1.0) / t_new) * (w_new - w)
            t = t_new
        w = w_new
    return to_x(w), max_iter, False


def _pattern(problem: CompositeProblem, x, ztol: float):
    """Affine description of the optimality system on the active pattern.

    Returns ``(fixed, cols, lb, ub)`` with the subdifferential sum equal to
    ``grad s(x) + fixed + cols @ zeta`` for ``lb <= zeta <= ub``, or
    ``None`` if ``x`` violates a box by more than ``ztol``.
    """
    n = problem.dim
    fixed = np.zeros(n)
    cols, lb, ub = [], [], []
    for t in problem.terms:
        Lx = t.apply(x)
        Ld = t.matrix(n)
        if isinstance(t.g, L1Norm):
            a = t.g.alpha
            zero = np.abs(Lx) <= ztol
            fixed += Ld[~zero].T @ (a * np.sign(Lx[~zero]))
            cols.append(Ld[zero].T)
            lb.append(np.full(zero.sum(), -a))
            ub.append(np.full(zero.sum(), a))
        elif isinstance(t.g, Box):
            lo, hi = t.g.lo, t.g.hi
            if np.any(Lx < lo - ztol) or np.any(Lx > hi + ztol):
                return None
            at_lo = Lx <= lo + ztol
            at_hi = Lx >= hi - ztol
            act = at_lo | at_hi
            cols.append(Ld[act].T)
            lb.append(np.where(at_lo[act], -np.inf, 0.0))
            ub.append(np.where(at_hi[act], np.inf, 0.0))
    if cols:
        return fixed, np.hstack(cols), np.concatenate(lb), np.concatenate(ub)
    return fixed, np.zeros((n, 0)), np.zeros(0), np.zeros(0)


def subgradient_check(problem: CompositeProblem, x, tol: float = 1e-9,
                      ztol: Optional[float] = None) -> float:
    """Distance from ``0`` to ``grad s(x) + sum_i L_i^T dg_i(L_i x)``.

    Components of ``L_i x`` within ``ztol`` (default ``tol``) of a kink or
    a bound are treated as active. Returns ``inf`` outside a box.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError("x has the wrong dimension")
    pat = _pattern(problem, x, tol if ztol is None else ztol)
    if pat is None:
        return math.inf
    fixed, A, lb, ub = pat
    r = problem.gradient(x) + fixed
    if A.shape[1] == 0:
        return float(np.linalg.norm(r))
    sol = lsq_linear(A, -r, bounds=(lb, ub), method="bvls", tol=1e-14)
    return float(np.linalg.norm(A @ sol.x + r))


def _smooth_affine(s: ResolventOp, x):
    """``(H, c)`` with ``grad s = H y - c`` near ``x`` (exact on the Huber pattern)."""
    n = x.size
    if isinstance(s, Quadratic):
        return s.hessian(x), np.array(s.Rtb, dtype=float)
    if isinstance(s, Huber):
        d = s.hessian_diag(x)
        quad = d > 0
        shift = np.broadcast_to(s.shift, (n,))
        c = np.where(quad, d * shift, -s.scale * np.sign(x - shift))
        return np.diag(d), c
    return np.zeros((n, n)), np.zeros(n)


def dense_kkt(problem: CompositeProblem, x_guess=None, tol: float = 1e-12, rounds: int = 8):
    """Exact solve of the optimality system on an identified active pattern.

    For linear-quadratic problems this is a single dense solve. Otherwise
    the pattern (kinks, active bounds, Huber regions) is read from
    ``x_guess`` (or a proximal-gradient warm start), the resulting linear
    KKT system is solved, and the pattern is refreshed until the
    certificate holds.
    """
    n = problem.dim
    s = problem.smooth
    if not problem.terms and isinstance(s, Quadratic):
        Rd = s._Rd()
        return np.linalg.lstsq(Rd, s.b, rcond=None)[0]
    if x_guess is None:
        x_guess = proximal_gradient(problem, tol=1e-9, max_iter=200_000)[0]
    x = np.asarray(x_guess, dtype=float)
    best, best_res = x, math.inf
    for _ in range(rounds):
        ztol = 1e-7 * max(1.0, float(np.abs(x).max()))
        rows, rhs_c = [], []
        fixed = np.zeros(n)
        cols = []
        for t in problem.terms:
            Lx = t.apply(x)
            Ld = t.matrix(n)
            if isinstance(t.g, L1Norm):
                zero = np.abs(Lx) <= ztol
                fixed += Ld[~zero].T @ (t.g.alpha * np.sign(Lx[~zero]))
                rows.append(Ld[zero])
                rhs_c.append(np.zeros(zero.sum()))
            elif isinstance(t.g, Box):
                at_lo = Lx <= t.g.lo + ztol
                at_hi = Lx >= t.g.hi - ztol
                act = at_lo | at_hi
                rows.append(Ld[act])
                rhs_c.append(np.where(at_lo[act], t.g.lo, t.g.hi))
        H, c = _smooth_affine(s, x)
        C = np.vstack(rows) if rows else np.zeros((0, n))
        d = np.concatenate(rhs_c) if rhs_c else np.zeros(0)
        m = C.shape[0]
        K = np.block([[H, C.T], [C, np.zeros((m, m))]])
        sol = np.linalg.lstsq(K, np.concatenate([c - fixed, d]), rcond=None)[0]
        x_new = sol[:n]
        res = subgradient_check(problem, x_new, tol=tol, ztol=1e-9 * max(1.0, float(np.abs(x_new).max())))
        if res < best_res:
            best, best_res = x_new, res
        if res <= tol * _scale(problem, x_new):
            return x_new
        if np.allclose(x_new, x, rtol=0, atol=1e-15):
            break
        x = x_new
    return best


def _scale(problem: CompositeProblem, x) -> float:
    return max(1.0, float(np.linalg.norm(problem.gradient(x))))


def oracle_solve(problem: CompositeProblem, config: Optional[OracleConfig] = None, x0=None):
    """Certified minimizer and minimum value.

    Raises
    ------
    CertificationError
        If the subgradient residual exceeds ``10 tol max(1, ||grad s(x)||)``.
    """
    config = OracleConfig() if config is None else config
    if config.method == "proximal_gradient":
        x = proximal_gradient(problem, tol=config.tol, max_iter=config.max_iter, x0=x0)[0]
    else:
        x = dense_kkt(problem, x_guess=x0, tol=config.tol)
    ztol = 1e-9 * max(1.0, max((float(np.abs(t.apply(x)).max()) for t in problem.terms), default=1.0))
    res = subgradient_check(problem, x, tol=config.tol, ztol=ztol)
    if not res <= 10.0 * config.tol * _scale(problem, x):
        raise CertificationError(f"{config.method}: subgradient residual {res:.3e}", residual=res)
    return x, problem.value(x)


def finite_difference_check(piece: ResolventOp, x, h: float = 1e-6) -> float:
    """Max central-difference defect of ``piece.gradient``, relative to ``max(1, ||grad||_inf)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.asarray(piece.gradient(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (piece.value(x + e) - piece.value(x - e)) / (2.0 * h)
    return float(np.abs(fd - g).max() / max(1.0, float(np.abs(g).max())))


def improvement_pct(F_ref: float, F: float) -> float:
    """``(F_ref - F) 100 / |F_ref|``; positive when ``F`` beats the reference."""
    if F_ref == 0.0:
        return 0.0 if F == 0.0 else -math.copysign(math.inf, F)
    return (F_ref - F) * 100.0 / abs(F_ref)
