"""Total-variation restoration: ``min_{x in [0,255]^N} 1/2||Rx - b||^2 + alpha ||grad x||_1``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..linops import ConditionReport, LinearOp, Metric, check_metric_condition, identity, stack
from ..prox import Box, L1Norm, Quadratic
from ..solvers import (Block, MultiBlockProblem, MultiBlockState, SolveReport, StoppingRule,
                       sdr_multiblock_step, solve)
from .imaging import add_noise, gaussian_blur_op, grad_norm_sq, grad_op, psnr, synthetic_image

__all__ = [
    "TvProblem",
    "build_tv",
    "kappa_steps",
    "boundary_steps",
    "tv_objective",
    "tv_condition",
    "run_tv",
]

DEFAULT_ALPHA = 0.5


@dataclass
class TvProblem:
    shape: tuple
    R: LinearOp
    b: np.ndarray
    alpha: float
    tau: float
    sigma1: float
    sigma2: float
    lo: float = 0.0
    hi: float = 255.0
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if min(self.tau, self.sigma1, self.sigma2) <= 0:
            raise ValueError("step sizes must be positive")
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.b.size != self.shape[0] * self.shape[1]:
            raise ValueError("observation size does not match the image shape")

    @property
    def grad(self) -> LinearOp:
        return grad_op(*self.shape)

    @property
    def N(self) -> int:
        return self.shape[0] * self.shape[1]


def kappa_steps(kappa: float, nrm2: float):
    """``tau = sigma1 = sigma2 = kappa / (10 sqrt(1 + ||grad||^2))``."""
    t = kappa / (10.0 * math.sqrt(1.0 + nrm2))
    return t, t, t


def boundary_steps(tau: float, ell: float, nrm2: float):
    """``sigma1 = (1 - ell)/(tau ||grad||^2)``, ``sigma2 = ell / tau``; on the boundary."""
    if not 0 < ell < 1:
        raise ValueError("ell must lie in (0, 1)")
    return tau, (1.0 - ell) / (tau * nrm2), ell / tau


def tv_objective(prob: TvProblem, x) -> float:
    """``1/2||Rx - b||^2 + alpha ||grad x||_1`` (anisotropic)."""
    x = np.asarray(x, dtype=float).ravel()
    r = prob.R.apply(x) - prob.b
    return 0.5 * float(r @ r) + prob.alpha * float(np.abs(prob.grad.apply(x)).sum())


def tv_condition(prob: TvProblem, method: Optional[str] = None) -> ConditionReport:
    """Certify ``tau sigma1 ||grad||^2 + tau sigma2 <= 1``.

    ``method=None`` uses the closed form ``1 - tau sigma1 ||grad||^2 - tau sigma2``
    (``grad* grad`` and ``Id`` commute); ``"dense_eigen"`` runs the generic
    dense checker.
    """
    if method is None:
        nrm2 = grad_norm_sq(*prob.shape)
        margin = 1.0 - prob.tau * prob.sigma1 * nrm2 - prob.tau * prob.sigma2
        return ConditionReport(margin >= -1e-9, margin, "power_iteration")
    N = prob.N
    L = stack([prob.grad, identity(N)])
    S = Metric.diagonal(np.concatenate([np.full(2 * N, prob.sigma1), np.full(N, prob.sigma2)]))
    return check_metric_condition(Metric.scalar(prob.tau, N), S, L, tol=1e-9, method=method)


def build_tv(n: int, seed: int = 0, alpha: float = DEFAULT_ALPHA, blur: bool = True,
             noise_std: float = 1e-3, image: Optional[np.ndarray] = None,
             tau: Optional[float] = None, sigma1: Optional[float] = None,
             sigma2: Optional[float] = None, kappa: float = 10.0) -> TvProblem:
    """Synthetic (or given) image, blurred and noised with ``seed``.

    Missing step sizes default to the ``kappa`` rule.
    """
    truth = synthetic_image(n, seed) if image is None else np.asarray(image, dtype=float)
    shape = truth.shape
    R = gaussian_blur_op(*shape) if blur else identity(shape[0] * shape[1])
    b = R.apply(truth.ravel())
    if noise_std > 0:
        b = add_noise(b, noise_std, seed=seed + 1_000_003)
    if tau is None or sigma1 is None or sigma2 is None:
        t, s1, s2 = kappa_steps(kappa, grad_norm_sq(*shape))
        tau = t if tau is None else tau
        sigma1 = s1 if sigma1 is None else sigma1
        sigma2 = s2 if sigma2 is None else sigma2
    return TvProblem(shape, R, b, alpha, tau, sigma1, sigma2, truth=truth.ravel())


def _multiblock(prob: TvProblem, unchecked: bool) -> MultiBlockProblem:
    N = prob.N
    blocks = [Block(L1Norm(prob.alpha), prob.grad, Metric.scalar(prob.sigma1, 2 * N)),
              Block(Box(prob.lo, prob.hi), identity(N), Metric.scalar(prob.sigma2, N))]
    return MultiBlockProblem(Quadratic(prob.R, prob.b), blocks, Metric.scalar(prob.tau, N),
                             unchecked=unchecked, condition=tv_condition(prob))


def run_tv(prob: TvProblem, rule: StoppingRule, record_objective: bool = True,
           unchecked: bool = False) -> SolveReport:
    """Multi-block primal-dual iteration from ``x0 = b``, ``v = 0``.

    The report gains ``psnr`` (against ``prob.truth`` when known) and
    ``objective``.
    """
    mb = _multiblock(prob, unchecked)
    N = prob.N
    state = MultiBlockState(prob.b.copy(), [np.zeros(2 * N), np.zeros(N)])
    obj = (lambda s: tv_objective(prob, s.x)) if record_objective else None
    rep = solve(lambda s: sdr_multiblock_step(mb, s), state, rule, objective=obj)
    rep.objective = tv_objective(prob, rep.state.x)
    rep.psnr = psnr(prob.truth, rep.state.x) if prob.truth is not None else float("nan")
    return rep
