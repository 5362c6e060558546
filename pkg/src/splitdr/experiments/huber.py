"""Huber data fit with an l1 penalty on ``M x``, solved through a spectral split ``M = K T``.

``min_x h(x - z) + alpha ||M x||_1`` with ``M = P D P^T``,
``K = P D^{1-eta} P^T`` and ``T = P D^eta P^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from ..linops import Metric, identity, matrix_op
from ..prox import Huber, L1Norm, SubproblemError, huber_grad, huber_value
from ..solvers import (SadmmProblem, SadmmState, SolveReport, StoppingRule, explicit_split_step,
                       relative_residual, sadmm_step, solve)

__all__ = [
    "CLASS_LAMBDA_MAX",
    "KAPPA",
    "HuberProblem",
    "build_huber",
    "huber_p_update",
    "HuberPUpdate",
    "huber_objective",
    "run_huber",
]

KAPPA = 50.0
CLASS_LAMBDA_MAX = {
    "A": lambda N: N / 1000.0,
    "B": lambda N: 4.0 * N,
    "C": lambda N: 100.0 * N,
}
# with tau = 1 the scale of (delta, z) sets the effective penalty; these keep
# every class nontrivial (solution away from 0 and from z)
DEFAULT_ALPHA = 1e-3
DEFAULT_DELTA = 1e-3
DEFAULT_Z_SCALE = 1e-3


@dataclass
class HuberProblem:
    N: int
    cls: str
    P: np.ndarray
    d: np.ndarray
    z: np.ndarray
    alpha: float = DEFAULT_ALPHA
    delta: float = DEFAULT_DELTA
    seed: int = 0

    @property
    def M(self) -> np.ndarray:
        return (self.P * self.d) @ self.P.T

    def K(self, eta: float) -> np.ndarray:
        return (self.P * self.d ** (1.0 - eta)) @ self.P.T

    def T(self, eta: float) -> np.ndarray:
        return (self.P * self.d ** eta) @ self.P.T

    def K_norm_sq(self, eta: float) -> float:
        return float(self.d.max() ** (2.0 * (1.0 - eta)))


def build_huber(N: int, cls: str, seed: int = 0, alpha: float = DEFAULT_ALPHA,
                delta: float = DEFAULT_DELTA, z_scale: float = DEFAULT_Z_SCALE) -> HuberProblem:
    """Random instance of class ``A``, ``B`` or ``C`` with condition number 50.

    ``P`` is the orthogonal factor of a seeded Gaussian matrix; the spectrum
    is log-uniform between ``lambda_max / 50`` and ``lambda_max`` with both
    endpoints present. ``z`` is Gaussian with standard deviation ``z_scale``.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    cls = cls.upper()
    if cls not in CLASS_LAMBDA_MAX:
        raise ValueError(f"unknown class {cls!r}")
    rng = np.random.default_rng(seed)
    Q, Rq = np.linalg.qr(rng.standard_normal((N, N)))
    P = Q * np.sign(np.diag(Rq))
    hi = CLASS_LAMBDA_MAX[cls](N)
    lo = hi / KAPPA
    d = np.exp(rng.uniform(np.log(lo), np.log(hi), N))
    d[0], d[1] = hi, lo
    z = z_scale * rng.standard_normal(N)
    return HuberProblem(N, cls, P, d, z, alpha, delta, seed)


def huber_objective(prob: HuberProblem, x) -> float:
    """``h(x - z) + alpha ||M x||_1``."""
    x = np.asarray(x, dtype=float)
    return huber_value(x, prob.delta, prob.z) + prob.alpha * float(np.abs(prob.M @ x).sum())


class HuberPUpdate:
    """Semismooth Newton for ``sigma grad h(p - z) + T^T (T p - c) = 0``.

    ``T^T T`` is formed once; each call runs at most ``max_iter`` Newton
    steps with an Armijo line search on the strongly convex objective
    ``sigma h(p - z) + 1/2 ||T p - c||^2``.
    """

    def __init__(self, T, sigma: float, z, delta: float, tol: float = 1e-10, max_iter: int = 50):
        self.T = np.asarray(T, dtype=float)
        self.TtT = self.T.T @ self.T
        self.sigma = float(sigma)
        self.z = np.asarray(z, dtype=float)
        self.delta = float(delta)
        self.tol = tol
        self.max_iter = max_iter
        self.newton_iterations = 0
        self.calls = 0
        self._pattern = None
        self._chol = None

    def _factor(self, quad):
        """Cholesky factor of ``T^T T + diag(sigma/delta on quad)``, reused while ``quad`` is unchanged."""
        if self._pattern is None or not np.array_equal(quad, self._pattern):
            H = self.TtT + np.diag(np.where(quad, self.sigma / self.delta, 0.0))
            self._chol = scipy.linalg.cho_factor(H, check_finite=False)
            self._pattern = quad.copy()
        return self._chol

    def __call__(self, c, p_prev):
        T, TtT, s, z, dl = self.T, self.TtT, self.sigma, self.z, self.delta
        Ttc = T.T @ c
        scale = max(1.0, float(np.linalg.norm(Ttc)))
        p = np.array(p_prev, dtype=float)
        self.calls += 1

        def merit(q):
            r = T @ q - c
            return s * huber_value(q, dl, z) + 0.5 * float(r @ r)

        F = s * huber_grad(p, dl, z) + TtT @ p - Ttc
        nF = float(np.linalg.norm(F))
        if nF <= self.tol * scale:
            return p
        phi = merit(p)
        for k in range(1, self.max_iter + 1):
            step = -scipy.linalg.cho_solve(self._factor(np.abs(p - z) < dl), F, check_finite=False)
            slope = float(F @ step)
            t = 1.0
            while True:
                q = p + t * step
                phi_q = merit(q)
                if phi_q <= phi + 1e-4 * t * slope + 1e-15 * abs(phi) or t < 1e-10:
                    break
                t *= 0.5
            tiny = np.linalg.norm(q - p) <= 1e-15 * max(1.0, float(np.linalg.norm(p)))
            p, phi = q, phi_q
            F = s * huber_grad(p, dl, z) + TtT @ p - Ttc
            nF = float(np.linalg.norm(F))
            self.newton_iterations += 1
            if nF <= self.tol * scale or tiny:
                return p
        raise SubproblemError(f"Huber p-update: residual {nF:.3e} after {self.max_iter} Newton steps",
                              iterations=self.max_iter, residual=nF)


def huber_p_update(T, K, sigma: float, y, p_prev, z, delta: float):
    """``zer(sigma grad h(. - z) + T^T(T . - (T p_prev - sigma K^T y)))``.

    ``T`` and ``K`` are dense matrices.
    """
    T = np.asarray(T, dtype=float)
    K = np.asarray(K, dtype=float)
    c = T @ p_prev - sigma * (K.T @ y)
    return HuberPUpdate(T, sigma, z, delta)(c, p_prev)


def run_huber(prob: HuberProblem, eta: float, rule: StoppingRule, tau: float = 1.0,
              sigma: Optional[float] = None, record_objective: bool = False) -> SolveReport:
    """Split-ADMM (explicit split when ``eta = 0``) from ``p = q = x = 0``.

    Stops on the relative change of ``(x, u)`` with ``u`` the recovered
    dual. The report gains ``F_final``, ``sigma`` and ``newton_iterations``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    N = prob.N
    if sigma is None:
        sigma = 0.99 / (tau * prob.K_norm_sq(eta))
    Kd = prob.K(eta)
    g = Huber(prob.delta, prob.z)
    f = L1Norm(prob.alpha)
    Y = Metric.scalar(tau, N)
    S = Metric.scalar(sigma, N)
    if eta == 0.0:
        sp = SadmmProblem(g, f, identity(N), matrix_op(Kd), Y, S)
        step = lambda s: explicit_split_step(sp, s)
        newton = None
    else:
        Td = prob.T(eta)
        newton = HuberPUpdate(Td, sigma, prob.z, prob.delta)
        sp = SadmmProblem(g, f, matrix_op(Td), matrix_op(Kd), Y, S, p_solver=newton)
        step = lambda s: sadmm_step(sp, s)

    def residual(new, old):
        u_old = old.u if old.u is not None else -sp.T.apply(old.p)
        return relative_residual((new.x, new.u), (old.x, u_old))

    zero = np.zeros(N)
    state = SadmmState(zero.copy(), zero.copy(), zero.copy())
    obj = (lambda s: huber_objective(prob, s.p)) if record_objective else None
    rep = solve(step, state, rule, residual=residual, objective=obj)
    rep.F_final = huber_objective(prob, rep.state.p)
    rep.sigma = sigma
    rep.newton_iterations = 0 if newton is None else newton.newton_iterations
    return rep
