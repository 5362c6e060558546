"""Split-Douglas-Rachford, its primal-dual, multi-block and DRS forms, and Split-ADMM.

Every ``*_step`` function is a pure state transformer; :func:`solve` drives
any of them with a stopping rule.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .linops import LinearOp, Metric, check_metric_condition
from .prox import DualComposite, ResolventOp, conjugate_resolvent, solve_composite

__all__ = [
    "ConditionError",
    "SdrProblem",
    "SdrState",
    "PdsState",
    "Block",
    "MultiBlockProblem",
    "MultiBlockState",
    "SadmmProblem",
    "SadmmState",
    "Admm2Problem",
    "Admm2State",
    "StoppingRule",
    "SolveReport",
    "sdr_step",
    "apply_T",
    "pds_initial_dual",
    "pds_step",
    "sdr_multiblock_step",
    "drs_step",
    "linear_composite_resolvent",
    "sadmm_step",
    "admm2_step",
    "explicit_split_step",
    "relative_residual",
    "kkt_residual",
    "fejer_quantity",
    "solve",
    "sadmm_as_sdr",
    "sdr_state_from_sadmm",
    "sadmm_state_from_sdr",
]

Array = np.ndarray


class ConditionError(ValueError):
    """Step sizes violate the metric monotonicity condition."""


def _require(Y, S, L, unchecked, what):
    if unchecked:
        warnings.warn(f"{what}: metric condition not checked", RuntimeWarning, stacklevel=3)
        return None
    rep = check_metric_condition(Y, S, L)
    if not rep.is_monotone:
        raise ConditionError(f"{what}: metric condition fails (margin {rep.margin:.3e})")
    return rep


# SDR ----------------------------------------------------------------------

@dataclass
class SdrProblem:
    """Find ``x`` with ``0 in A x + L* B L x`` using metrics ``Y`` (on H) and ``S`` (on G)."""

    A: ResolventOp
    B: ResolventOp
    L: LinearOp
    Y: Metric
    S: Metric
    unchecked: bool = False

    def __post_init__(self):
        self.condition = _require(self.Y, self.S, self.L, self.unchecked, "SDR")


@dataclass
class SdrState:
    x: Array
    u: Array
    Lx: Optional[Array] = None
    v: Optional[Array] = None
    z: Optional[Array] = None

    def vector(self):
        return np.concatenate([self.x, self.u])


def sdr_step(prob: SdrProblem, s: SdrState) -> SdrState:
    """One iteration; one application each of ``L`` and ``L*``."""
    L, Y, S = prob.L, prob.Y, prob.S
    Lx = L.apply(s.x) if s.Lx is None else s.Lx
    v = conjugate_resolvent(prob.B, S, S(Lx) + s.u)
    z = s.x - Y(L.adjoint_apply(v))
    x = prob.A.resolvent(Y, z)
    Lx_new = L.apply(x)
    u = S(Lx_new - Lx) + v
    return SdrState(x, u, Lx_new, v, z)


def apply_T(prob: SdrProblem, point):
    """The fixed-point map ``(x, u) -> (x+, u+)`` of the SDR iteration."""
    x, u = point
    s = sdr_step(prob, SdrState(np.asarray(x, float), np.asarray(u, float)))
    return s.x, s.u


@dataclass
class PdsState:
    x: Array
    v: Array
    Lx: Optional[Array] = None

    def vector(self):
        return np.concatenate([self.x, self.v])


def pds_initial_dual(prob: SdrProblem, x0, u0):
    """``v0 = S (Id - J_{S^{-1} B})(L x0 + S^{-1} u0)``, matching SDR started at ``(x0, u0)``."""
    return conjugate_resolvent(prob.B, prob.S, prob.S(prob.L.apply(x0)) + u0)


def pds_step(prob: SdrProblem, s: PdsState) -> PdsState:
    L, Y, S = prob.L, prob.Y, prob.S
    Lx = L.apply(s.x) if s.Lx is None else s.Lx
    x = prob.A.resolvent(Y, s.x - Y(L.adjoint_apply(s.v)))
    Lx_new = L.apply(x)
    v = conjugate_resolvent(prob.B, S, s.v + S(2.0 * Lx_new - Lx))
    return PdsState(x, v, Lx_new)


# multi-block --------------------------------------------------------------

@dataclass
class Block:
    B: ResolventOp
    L: LinearOp
    S: Metric


@dataclass
class MultiBlockProblem:
    """``0 in A x + sum_i L_i* B_i L_i x``."""

    A: ResolventOp
    blocks: List[Block]
    Y: Metric
    unchecked: bool = False
    condition: Optional[object] = None

    def __post_init__(self):
        from .linops import stack
        if not self.blocks:
            raise ValueError("at least one block is required")
        if self.condition is not None:
            # caller certified the condition (e.g. analytically)
            if not self.condition.is_monotone:
                msg = f"multi-block SDR: metric condition fails (margin {self.condition.margin:.3e})"
                if not self.unchecked:
                    raise ConditionError(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
            return
        L = stack([b.L for b in self.blocks])
        S = Metric.block([b.S for b in self.blocks])
        self.condition = _require(self.Y, S, L, self.unchecked, "multi-block SDR")


@dataclass
class MultiBlockState:
    x: Array
    v: List[Array]
    Lx: Optional[List[Array]] = None

    def vector(self):
        return np.concatenate([self.x, *self.v])


def sdr_multiblock_step(prob: MultiBlockProblem, s: MultiBlockState) -> MultiBlockState:
    """Primal-dual form over the product space; one ``L_i`` and ``L_i*`` per block."""
    Lx = s.Lx if s.Lx is not None else [b.L.apply(s.x) for b in prob.blocks]
    acc = prob.blocks[0].L.adjoint_apply(s.v[0])
    for b, vi in zip(prob.blocks[1:], s.v[1:]):
        acc = acc + b.L.adjoint_apply(vi)
    x = prob.A.resolvent(prob.Y, s.x - prob.Y(acc))
    Lx_new, v_new = [], []
    for i, (b, vi, Lxi) in enumerate(zip(prob.blocks, s.v, Lx)):
        Li_x = b.L.apply(x)
        try:
            v_new.append(conjugate_resolvent(b.B, b.S, vi + b.S(2.0 * Li_x - Lxi)))
        except Exception as exc:
            raise type(exc)(f"block {i}: {exc}") from exc
        Lx_new.append(Li_x)
    return MultiBlockState(x, v_new, Lx_new)


# DRS ----------------------------------------------------------------------

def drs_step(A: ResolventOp, JBL: Callable[[Array], Array], z: Array, Y: Metric) -> Array:
    """``z+ = J_{Y L*BL}(2 J_{YA} z - z) + z - J_{YA} z``.

    ``JBL`` evaluates ``J_{Y L* B L}``; see :func:`linear_composite_resolvent`.
    """
    xa = A.resolvent(Y, z)
    return JBL(2.0 * xa - z) + z - xa


def linear_composite_resolvent(L: LinearOp, Y: Metric, Bmat) -> Callable[[Array], Array]:
    """``J_{Y L* B L} = Id - Y L* (L Y L* + B^{-1})^{-1} L`` for linear monotone ``B``.

    Uses ``(M + B^{-1})^{-1} = B (M B + Id)^{-1}`` so ``B`` may be singular.
    """
    Ld = L.to_dense()
    Yd = Y.to_dense()
    Bd = np.atleast_2d(np.asarray(Bmat, dtype=float))
    M = Ld @ Yd @ Ld.T
    inner = Bd @ np.linalg.inv(M @ Bd + np.eye(M.shape[0]))
    op = np.eye(Ld.shape[1]) - Yd @ Ld.T @ inner @ Ld
    return lambda w: op @ w


# SADMM --------------------------------------------------------------------

PSolver = Callable[[Array, Array], Array]


@dataclass
class SadmmProblem:
    """``min_p g(p) + f(K T p)`` with ``T: P -> G``, ``K: G -> H``, ``Y`` on H, ``S`` on G.

    ``p_solver(c, p_prev)`` returns ``argmin g(p) + 1/2||Tp - c||^2_{S^{-1}}``;
    the default is :func:`splitdr.prox.solve_composite`.
    """

    g: ResolventOp
    f: ResolventOp
    T: LinearOp
    K: LinearOp
    Y: Metric
    S: Metric
    p_solver: Optional[PSolver] = None
    unchecked: bool = False
    inner_iterations: int = field(default=0, init=False)

    def __post_init__(self):
        if self.T.out_dim != self.K.in_dim:
            raise ValueError("T must map into the domain of K")
        # roles swap: S^{-1} - K* Y K monotone
        self.condition = _require(self.S, self.Y, self.K, self.unchecked, "SADMM")
        self._Sinv = self.S.inverse()

    def solve_p(self, c, p_prev):
        if self.p_solver is not None:
            return self.p_solver(c, p_prev)
        p, it = solve_composite(self.g, self.T, self._Sinv, c, p0=p_prev)
        self.inner_iterations += it
        return p

    def objective(self, p):
        return self.g.value(p) + self.f.value(self.K.apply(self.T.apply(p)))


@dataclass
class SadmmState:
    p: Array
    q: Array
    x: Array
    y: Optional[Array] = None
    u: Optional[Array] = None
    Tp: Optional[Array] = None
    KTp: Optional[Array] = None

    def vector(self):
        return np.concatenate([self.p, self.q, self.x])


def _cached_products(prob, s):
    Tp = prob.T.apply(s.p) if s.Tp is None else s.Tp
    KTp = prob.K.apply(Tp) if s.KTp is None else s.KTp
    return Tp, KTp


def sadmm_step(prob: SadmmProblem, s: SadmmState) -> SadmmState:
    Y, S, K, T = prob.Y, prob.S, prob.K, prob.T
    Tp, KTp = _cached_products(prob, s)
    y = s.x + Y(KTp - s.q)
    p = prob.solve_p(Tp - S(K.adjoint_apply(y)), s.p)
    Tp_new = T.apply(p)
    KTp_new = K.apply(Tp_new)
    q = prob.f.prox(Y, Y.solve(s.x) + KTp_new)
    x = s.x + Y(KTp_new - q)
    u = S(K.adjoint_apply(x - s.x)) - Tp_new
    return SadmmState(p, q, x, y, u, Tp_new, KTp_new)


def explicit_split_step(prob: SadmmProblem, s: SadmmState) -> SadmmState:
    """SADMM with ``T = Id`` and the p-update replaced by an explicit prox."""
    if prob.T.scalar != 1.0:
        raise ValueError("explicit split requires T = Id")
    Y, S, K = prob.Y, prob.S, prob.K
    Kp = K.apply(s.p) if s.KTp is None else s.KTp
    y = s.x + Y(Kp - s.q)
    p = prob.g.prox(S.inverse(), s.p - S(K.adjoint_apply(y)))
    Kp_new = K.apply(p)
    q = prob.f.prox(Y, Y.solve(s.x) + Kp_new)
    x = s.x + Y(Kp_new - q)
    u = S(K.adjoint_apply(x - s.x)) - p
    return SadmmState(p, q, x, y, u, p, Kp_new)


@dataclass
class Admm2Problem:
    """``min g(y) + h(v)`` subject to ``K T y + J v = 0``."""

    g: ResolventOp
    h: ResolventOp
    T: LinearOp
    K: LinearOp
    J: LinearOp
    Y: Metric
    S: Metric
    unchecked: bool = False

    def __post_init__(self):
        if self.J.out_dim != self.K.out_dim:
            raise ValueError("J and K must share their range space")
        self.condition = _require(self.S, self.Y, self.K, self.unchecked, "ADMM")


@dataclass
class Admm2State:
    p: Array
    v: Array
    x: Array
    y: Optional[Array] = None

    def vector(self):
        return np.concatenate([self.p, self.v, self.x])


def admm2_step(prob: Admm2Problem, s: Admm2State) -> Admm2State:
    Y, S, K, T, J = prob.Y, prob.S, prob.K, prob.T, prob.J
    Tp = T.apply(s.p)
    y = s.x + Y(K.apply(Tp) + J.apply(s.v))
    p, _ = solve_composite(prob.g, T, S.inverse(), Tp - S(K.adjoint_apply(y)), p0=s.p)
    KTp = K.apply(T.apply(p))
    v, _ = solve_composite(prob.h, J, Y, -(KTp + Y.solve(s.x)), p0=s.v)
    x = s.x + Y(KTp + J.apply(v))
    return Admm2State(p, v, x, y)


# equivalence maps ---------------------------------------------------------

def sadmm_as_sdr(prob: SadmmProblem) -> SdrProblem:
    """SDR problem with ``A = df*``, ``B = d(g* o -T*)``, ``L = K*``."""
    return SdrProblem(prob.f.inverse(), DualComposite(prob.g, prob.T), prob.K.T,
                      prob.Y, prob.S)


def sdr_state_from_sadmm(s: SadmmState) -> SdrState:
    """SADMM iterate ``n+1`` as an SDR start: ``(x_{n+1}, u_{n+1})``."""
    return SdrState(s.x.copy(), s.u.copy())


def sadmm_state_from_sdr(prob: SadmmProblem, prev: SdrState, cur: SdrState) -> SadmmState:
    """SADMM iterate ``n+1`` from SDR iterates ``n`` (with ``v_n``) and ``n+1``.

    ``T p = -v_n`` is solved in the least-squares sense.
    """
    Y, K = prob.Y, prob.K
    v = cur.v
    p = np.linalg.lstsq(prob.T.to_dense(), -v, rcond=None)[0]
    q = Y.solve(prev.x - cur.x) - K.apply(v)
    return SadmmState(p, q, cur.x.copy())


# residuals ----------------------------------------------------------------

def relative_residual(new, old) -> float:
    """``sqrt(||new - old||^2 / ||old||^2)``; absolute change when ``old = 0``."""
    new = np.concatenate([np.ravel(a) for a in new]) if isinstance(new, (tuple, list)) else np.ravel(new)
    old = np.concatenate([np.ravel(a) for a in old]) if isinstance(old, (tuple, list)) else np.ravel(old)
    d = float(np.linalg.norm(new - old))
    n = float(np.linalg.norm(old))
    return d if n == 0.0 else d / n


def kkt_residual(A: ResolventOp, B: ResolventOp, L: LinearOp, x, u,
                 Y: Optional[Metric] = None, S: Optional[Metric] = None) -> float:
    """``max(||x - J_{YA}(x - Y L* u)||, ||u - J_{S B^{-1}}(u + S L x)||)``."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    Y = Metric.scalar(1.0, L.in_dim) if Y is None else Y
    S = Metric.scalar(1.0, L.out_dim) if S is None else S
    r1 = x - A.resolvent(Y, x - Y(L.adjoint_apply(u)))
    r2 = u - conjugate_resolvent(B, S, u + S(L.apply(x)))
    return max(float(np.linalg.norm(r1)), float(np.linalg.norm(r2)))


def fejer_quantity(prob: SdrProblem, x, u, x_prev, xhat, uhat) -> float:
    """``||x - xhat||^2_{Y^-1} + ||u - uhat||^2_{S^-1} + ||x - x_prev||^2_U``, ``U = Y^-1 - L*SL``."""
    Yi, Si = prob.Y.inverse(), prob.S.inverse()
    dx = x - xhat
    du = u - uhat
    e = x - x_prev
    Le = prob.L.apply(e)
    U_e = Yi.norm_sq(e) - prob.S.norm_sq(Le)
    return Yi.norm_sq(dx) + Si.norm_sq(du) + U_e


# driver -------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """``tol = 0`` disables residual stopping (runs to ``max_iter``)."""

    tol: float = 1e-6
    max_iter: int = 10_000
    residual: str = "relative_change"

    def __post_init__(self):
        if self.tol < 0 or not np.isfinite(self.tol):
            raise ValueError("tol must be a finite nonnegative number")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.residual not in ("relative_change", "kkt"):
            raise ValueError(f"unknown residual {self.residual!r}")


@dataclass
class SolveReport:
    iterations: int
    status: str
    residual_history: List[float]
    objective_history: Optional[List[float]]
    wall_time: float
    state: object

    @property
    def converged(self):
        return self.status == "converged"

    @property
    def final_residual(self):
        return self.residual_history[-1] if self.residual_history else float("nan")


def solve(step: Callable, state, rule: StoppingRule, *,
          residual: Optional[Callable] = None, objective: Optional[Callable] = None,
          callback: Optional[Callable] = None) -> SolveReport:
    """Iterate ``state = step(state)`` until the residual drops to ``rule.tol``.

    ``residual(new, old)`` defaults to :func:`relative_residual` on
    ``state.vector()``; it is required for ``rule.residual == "kkt"``, where
    it is called as ``residual(new)``. ``objective(state)`` is recorded each
    iteration when given. ``callback(k, old, new)`` runs after each step.
    """
    if rule.residual == "kkt" and residual is None:
        raise ValueError("kkt stopping needs a residual callable")
    res_hist: List[float] = []
    obj_hist: Optional[List[float]] = [] if objective is not None else None
    t0 = time.perf_counter()
    status = "max_iter"
    k = 0
    for k in range(1, rule.max_iter + 1):
        new = step(state)
        if rule.residual == "kkt":
            r = float(residual(new))
        elif residual is not None:
            r = float(residual(new, state))
        else:
            r = relative_residual(new.vector(), state.vector())
        res_hist.append(r)
        if obj_hist is not None:
            obj_hist.append(float(objective(new)))
        if callback is not None:
            callback(k, state, new)
        state = new
        if rule.tol > 0 and r <= rule.tol:
            status = "converged"
            break
    return SolveReport(k, status, res_hist, obj_hist, time.perf_counter() - t0, state)
