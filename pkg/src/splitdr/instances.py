"""Seeded small dense problem instances and the equivalence runners.

Instances come with exact Kuhn-Tucker pairs where possible, so descent and
fixed-point properties can be checked without an iterative reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linops import LinearOp, Metric, identity, matrix_op
from .prox import Huber, L1Norm, LinearMonotone, Quadratic, ResolventOp
from .solvers import (PdsState, SadmmProblem, SadmmState, SdrProblem, SdrState,
                      drs_step, linear_composite_resolvent, pds_initial_dual, pds_step,
                      sadmm_as_sdr, sadmm_state_from_sdr, sadmm_step, sdr_state_from_sadmm,
                      sdr_step)

__all__ = [
    "KktInstance",
    "scalar_lasso",
    "random_kkt_instance",
    "random_sadmm_problem",
    "drs_instance",
    "sdr_vs_pds",
    "sdr_vs_drs",
    "sadmm_vs_sdr",
]


@dataclass
class KktInstance:
    prob: SdrProblem
    xhat: np.ndarray
    uhat: np.ndarray
    x0: np.ndarray
    u0: np.ndarray


def _scaled_metrics(rng, L: np.ndarray, fill: float, diag: bool = True):
    """Diagonal ``Y``, ``S`` with ``||S^{1/2} L Y^{1/2}||^2 = fill``."""
    m, n = L.shape
    y = rng.uniform(0.5, 2.0, n) if diag else np.full(n, rng.uniform(0.5, 2.0))
    s = rng.uniform(0.5, 2.0, m) if diag else np.full(m, rng.uniform(0.5, 2.0))
    nrm = np.linalg.norm(np.sqrt(s)[:, None] * L * np.sqrt(y)[None, :], 2) ** 2
    s *= fill / nrm
    return Metric.diagonal(y), Metric.diagonal(s)


def scalar_lasso(unchecked: bool = False) -> KktInstance:
    """``min |x| + 1/2 (x - 1)^2`` as ``A = d|.|``, ``B = d(1/2(. - 1)^2)``, ``L = 1``.

    The Kuhn-Tucker pair is ``(0, -1)``; start at ``(1, 0)`` with unit steps.
    """
    L = identity(1)
    prob = SdrProblem(L1Norm(1.0), Quadratic(identity(1), np.array([1.0])), L,
                      Metric.scalar(1.0, 1), Metric.scalar(1.0, 1), unchecked=unchecked)
    return KktInstance(prob, np.array([0.0]), np.array([-1.0]), np.array([1.0]), np.array([0.0]))


def random_kkt_instance(seed: int, n: Optional[int] = None, m: Optional[int] = None,
                        fill: float = 0.9, kind: int = 0) -> KktInstance:
    """Random instance with an exact Kuhn-Tucker pair.

    ``kind`` 0: ``A = d 1/2||x - a||^2``, ``B = beta ||.||_1``.
    ``kind`` 1: ``A = alpha ||.||_1``, ``B = d 1/2||. - b||^2``.
    ``kind`` 2: ``A = alpha ||.||_1``, ``B`` Huber.
    ``fill`` sets ``||S^{1/2} L Y^{1/2}||^2``; ``fill = 1`` is the boundary.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9)) if n is None else n
    if m is None:
        m = int(rng.integers(2, 9)) if kind == 0 else int(rng.integers(n, n + 4))
    if kind != 0 and m < n:
        raise ValueError("kinds 1 and 2 need m >= n")
    Ld = rng.standard_normal((m, n))
    L = matrix_op(Ld)
    Y, S = _scaled_metrics(rng, Ld, fill)
    if kind == 0:
        beta = rng.uniform(0.5, 2.0)
        k = min(m, n - 1)
        xhat = rng.standard_normal(n)
        rows = Ld[: rng.integers(1, k + 1)]
        xhat -= np.linalg.pinv(rows) @ (rows @ xhat)  # zero some entries of L xhat
        y = Ld @ xhat
        y[np.abs(y) < 1e-12] = 0.0
        uhat = np.where(y == 0, beta * rng.uniform(-0.9, 0.9, m), beta * np.sign(y))
        a = xhat + Ld.T @ uhat
        A = Quadratic(identity(n), a)
        B = L1Norm(beta)
    else:
        alpha = rng.uniform(0.2, 1.0)
        xhat = rng.standard_normal(n)
        xhat[rng.random(n) < 0.4] = 0.0
        # -L* uhat must lie in alpha d||xhat||_1; L* is onto since m >= n
        w = np.where(xhat == 0, alpha * rng.uniform(-0.9, 0.9, n), alpha * np.sign(xhat))
        uhat = -np.linalg.lstsq(Ld.T, w, rcond=None)[0]
        A = L1Norm(alpha)
        y = Ld @ xhat
        if kind == 1:
            b = y - uhat  # uhat = grad at y of 1/2||. - b||^2
            B = Quadratic(identity(m), b)
        else:
            delta = rng.uniform(0.5, 2.0)
            # Huber gradient phi'(y - z) = uhat needs |uhat| < 1
            uhat_c = np.clip(uhat, -0.9, 0.9)
            if not np.allclose(uhat_c, uhat):
                c = 0.9 / np.abs(uhat).max()
                uhat = uhat * c
                alpha *= c
                A = L1Norm(alpha)
            z = y - delta * uhat
            B = Huber(delta, z)
    prob = SdrProblem(A, B, L, Y, S)
    x0 = rng.standard_normal(n)
    u0 = rng.standard_normal(m)
    return KktInstance(prob, xhat, uhat, x0, u0)


def random_sadmm_problem(seed: int, n_p: Optional[int] = None, m: Optional[int] = None,
                         n_h: Optional[int] = None, fill: float = 0.9) -> SadmmProblem:
    """``min_p Huber(p - z) + alpha ||K T p||_1`` with injective dense ``T``."""
    rng = np.random.default_rng(seed)
    n_p = int(rng.integers(2, 7)) if n_p is None else n_p
    m = int(rng.integers(n_p, n_p + 4)) if m is None else m
    n_h = int(rng.integers(2, 9)) if n_h is None else n_h
    T = matrix_op(rng.standard_normal((m, n_p)) + 2.0 * np.eye(m, n_p))
    Kd = rng.standard_normal((n_h, m))
    K = matrix_op(Kd)
    y = rng.uniform(0.5, 2.0, n_h)
    s = rng.uniform(0.5, 2.0, m)
    nrm = np.linalg.norm(np.sqrt(y)[:, None] * Kd * np.sqrt(s)[None, :], 2) ** 2
    s *= fill / nrm
    g = Huber(rng.uniform(0.3, 2.0), rng.standard_normal(n_p) * 2.0)
    f = L1Norm(rng.uniform(0.1, 1.0))
    return SadmmProblem(g, f, T, K, Metric.diagonal(y), Metric.diagonal(s))


def drs_instance(seed: int, n: Optional[int] = None, m: Optional[int] = None):
    """Instance meeting the DRS reduction hypotheses.

    ``L`` is onto, ``S = (L Y L*)^{-1}`` and ``B`` is a symmetric positive
    semidefinite matrix.

    Returns
    -------
    (prob, Bmat, x0, u0)
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13)) if n is None else n
    m = int(rng.integers(2, n)) if m is None else m
    Ld = rng.standard_normal((m, n))
    Y = Metric.diagonal(rng.uniform(0.5, 2.0, n))
    S = Metric.dense(np.linalg.inv(Ld @ Y.to_dense() @ Ld.T))
    G = rng.standard_normal((m, m))
    Bmat = G @ G.T / m + 0.1 * np.eye(m)
    A = L1Norm(rng.uniform(0.2, 1.0))
    prob = SdrProblem(A, LinearMonotone(Bmat), matrix_op(Ld), Y, S)
    return prob, Bmat, rng.standard_normal(n), rng.standard_normal(m)


# equivalence runners -------------------------------------------------------

def sdr_vs_pds(seed: int, iters: int = 50, dim: Optional[int] = None) -> float:
    """Max primal deviation between SDR and its primal-dual form.

    ``dim`` fixes both space dimensions (random when ``None``).
    """
    inst = random_kkt_instance(seed, n=dim, m=dim, kind=seed % 3)
    prob = inst.prob
    s = SdrState(inst.x0, inst.u0)
    p = PdsState(inst.x0, pds_initial_dual(prob, inst.x0, inst.u0))
    dev = 0.0
    for _ in range(iters):
        s = sdr_step(prob, s)
        p = pds_step(prob, p)
        scale = max(1.0, float(np.abs(s.x).max()))
        dev = max(dev, float(np.abs(s.x - p.x).max()) / scale)
    return dev


def sdr_vs_drs(seed: int, iters: int = 200, dim: Optional[int] = None) -> float:
    """Max deviation of ``x_n - Y L* v_n`` from the DRS sequence.

    ``dim`` fixes the primal dimension; the dual one is ``dim - 1``.
    """
    prob, Bmat, x0, u0 = drs_instance(seed, n=dim, m=None if dim is None else max(1, dim - 1))
    JBL = linear_composite_resolvent(prob.L, prob.Y, Bmat)
    s = sdr_step(prob, SdrState(x0, u0))
    z = s.z
    dev = 0.0
    for _ in range(iters):
        z = drs_step(prob.A, JBL, z, prob.Y)
        s = sdr_step(prob, s)
        scale = max(1.0, float(np.abs(s.z).max()))
        dev = max(dev, float(np.abs(s.z - z).max()) / scale)
    return dev


def sadmm_vs_sdr(seed: int, iters: int = 100, dim: Optional[int] = None) -> float:
    """Max deviation over both directions of the SADMM/SDR correspondence.

    Compares ``T p``, ``q`` and ``x``; ``dim`` fixes every dimension.
    """
    prob = random_sadmm_problem(seed, n_p=dim, m=dim, n_h=dim)
    rng = np.random.default_rng(seed + 10_000)
    sprob = sadmm_as_sdr(prob)

    def close(a, b):
        return float(np.abs(a - b).max()) / max(1.0, float(np.abs(b).max()))

    # SADMM -> SDR: start SDR at (x_1, u_1)
    a = SadmmState(rng.standard_normal(prob.T.in_dim), rng.standard_normal(prob.K.out_dim),
                   rng.standard_normal(prob.K.out_dim))
    a = sadmm_step(prob, a)
    s = sdr_state_from_sadmm(a)
    dev = 0.0
    for _ in range(iters):
        a = sadmm_step(prob, a)
        s = sdr_step(sprob, s)
        dev = max(dev, close(s.x, a.x), close(s.u, a.u))

    # SDR -> SADMM: build SADMM iterate 1 from SDR iterates 0 and 1
    prev = SdrState(rng.standard_normal(prob.K.out_dim), rng.standard_normal(prob.T.out_dim))
    cur = sdr_step(sprob, prev)
    a = sadmm_state_from_sdr(prob, prev, cur)
    for _ in range(iters):
        nxt = sdr_step(sprob, cur)
        a = sadmm_step(prob, a)
        Tp_tilde = -nxt.v
        q_tilde = prob.Y.solve(cur.x - nxt.x) - prob.K.apply(nxt.v)
        dev = max(dev, close(a.Tp, Tp_tilde), close(a.q, q_tilde), close(a.x, nxt.x))
        cur = nxt
    return dev
