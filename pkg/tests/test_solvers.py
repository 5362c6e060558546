import numpy as np
import pytest

from splitdr.instances import (drs_instance, random_kkt_instance, random_sadmm_problem,
                               sadmm_vs_sdr, scalar_lasso, sdr_vs_drs, sdr_vs_pds)
from splitdr.linops import Metric, identity, matrix_op
from splitdr.prox import Huber, L1Norm, Quadratic
from splitdr.solvers import (Admm2Problem, admm2_step, Admm2State, Block, ConditionError, MultiBlockProblem,
                             MultiBlockState, PdsState, SadmmProblem, SadmmState, SdrProblem,
                             SdrState, StoppingRule, apply_T, explicit_split_step, fejer_quantity,
                             kkt_residual, linear_composite_resolvent, pds_initial_dual, pds_step,
                             relative_residual, sadmm_step, sdr_multiblock_step, sdr_step, solve)


# SDR ----------------------------------------------------------------------------------

def test_scalar_lasso_first_step_by_hand():
    # v = J_{B^-1}(1) = (1 - 1)/2 = 0, z = 1, x = soft(1, 1) = 0, u = (0 - 1) + 0 = -1
    inst = scalar_lasso()
    s = sdr_step(inst.prob, SdrState(inst.x0, inst.u0))
    assert s.v[0] == 0.0 and s.z[0] == 1.0
    assert s.x[0] == 0.0 and s.u[0] == -1.0


def test_scalar_lasso_kkt_pair_is_fixed():
    inst = scalar_lasso()
    x, u = apply_T(inst.prob, (inst.xhat, inst.uhat))
    np.testing.assert_array_equal(x, inst.xhat)
    np.testing.assert_array_equal(u, inst.uhat)
    p = inst.prob
    assert kkt_residual(p.A, p.B, p.L, inst.xhat, inst.uhat) == 0.0


@pytest.mark.parametrize("kind", [0, 1, 2])
def test_kkt_pair_is_a_fixed_point(kind):
    for seed in range(5):
        inst = random_kkt_instance(seed, kind=kind)
        p = inst.prob
        assert kkt_residual(p.A, p.B, p.L, inst.xhat, inst.uhat, p.Y, p.S) <= 1e-10
        x, u = apply_T(p, (inst.xhat, inst.uhat))
        np.testing.assert_allclose(x, inst.xhat, atol=1e-10)
        np.testing.assert_allclose(u, inst.uhat, atol=1e-10)


@pytest.mark.parametrize("kind", [0, 1, 2])
def test_sdr_converges_to_kkt_pair(kind):
    inst = random_kkt_instance(7, kind=kind)
    p = inst.prob
    rep = solve(lambda s: sdr_step(p, s), SdrState(inst.x0, inst.u0), StoppingRule(1e-13, 100_000))
    assert rep.converged
    assert kkt_residual(p.A, p.B, p.L, rep.state.x, rep.state.u, p.Y, p.S) <= 1e-8


@pytest.mark.parametrize("fill", [0.5, 0.9, 1.0])
def test_fejer_quantity_nonincreasing(fill):
    for seed in range(4):
        inst = random_kkt_instance(seed, fill=fill, kind=seed % 3)
        p = inst.prob
        s = SdrState(inst.x0, inst.u0)
        prev_x = s.x
        last = np.inf
        for _ in range(300):
            new = sdr_step(p, s)
            q = fejer_quantity(p, new.x, new.u, s.x, inst.xhat, inst.uhat)
            assert q <= last + 1e-10 * max(1.0, last if np.isfinite(last) else 1.0)
            last, s = q, new


def test_condition_error_and_unchecked_warning():
    L = identity(1)
    args = (L1Norm(), Quadratic(L, np.ones(1)), L, Metric.scalar(2.0, 1), Metric.scalar(1.0, 1))
    with pytest.raises(ConditionError):
        SdrProblem(*args)
    with pytest.warns(RuntimeWarning):
        SdrProblem(*args, unchecked=True)


# PDS and multi-block ----------------------------------------------------------------------

def test_pds_matches_sdr():
    for seed in range(6):
        assert sdr_vs_pds(seed, iters=40) <= 1e-12


def test_pds_initial_dual_equals_sdr_v():
    inst = random_kkt_instance(3, kind=1)
    v0 = pds_initial_dual(inst.prob, inst.x0, inst.u0)
    s = sdr_step(inst.prob, SdrState(inst.x0, inst.u0))
    np.testing.assert_allclose(v0, s.v, atol=1e-14)


def test_single_block_matches_pds():
    inst = random_kkt_instance(11, kind=2)
    p = inst.prob
    mb = MultiBlockProblem(p.A, [Block(p.B, p.L, p.S)], p.Y)
    v0 = pds_initial_dual(p, inst.x0, inst.u0)
    a = PdsState(inst.x0, v0)
    b = MultiBlockState(inst.x0, [v0])
    for _ in range(30):
        a = pds_step(p, a)
        b = sdr_multiblock_step(mb, b)
        np.testing.assert_allclose(b.x, a.x, atol=1e-12)
        np.testing.assert_allclose(b.v[0], a.v, atol=1e-12)


def test_two_blocks_match_stacked_pds(rng):
    """Two ``l1`` blocks equal one block on the stacked operator."""
    n = 4
    L1, L2 = rng.standard_normal((3, n)) * 0.3, rng.standard_normal((2, n)) * 0.3
    A = Quadratic(identity(n), rng.standard_normal(n))
    Y = Metric.scalar(1.0, n)
    sig = 0.9 / np.linalg.norm(np.vstack([L1, L2]), 2) ** 2
    S1, S2 = Metric.scalar(sig, 3), Metric.scalar(sig, 2)
    mb = MultiBlockProblem(A, [Block(L1Norm(0.5), matrix_op(L1), S1),
                               Block(L1Norm(0.5), matrix_op(L2), S2)], Y)
    p = SdrProblem(A, L1Norm(0.5), matrix_op(np.vstack([L1, L2])), Y, Metric.scalar(sig, 5))
    a = PdsState(np.zeros(n), np.zeros(5))
    b = MultiBlockState(np.zeros(n), [np.zeros(3), np.zeros(2)])
    for _ in range(30):
        a, b = pds_step(p, a), sdr_multiblock_step(mb, b)
        np.testing.assert_allclose(b.x, a.x, atol=1e-12)


def test_multiblock_checks_condition():
    n = 2
    blocks = [Block(L1Norm(), identity(n), Metric.scalar(1.0, n)),
              Block(L1Norm(), identity(n), Metric.scalar(1.0, n))]
    with pytest.raises(ConditionError):
        MultiBlockProblem(Quadratic(identity(n), np.zeros(n)), blocks, Metric.scalar(1.0, n))
    with pytest.raises(ValueError):
        MultiBlockProblem(Quadratic(identity(n), np.zeros(n)), [], Metric.scalar(1.0, n))


# DRS --------------------------------------------------------------------------------------

def test_linear_composite_resolvent_dense(rng):
    prob, Bmat, _, _ = drs_instance(2)
    J = linear_composite_resolvent(prob.L, prob.Y, Bmat)
    Ld, Yd = prob.L.to_dense(), prob.Y.to_dense()
    ref = np.linalg.inv(np.eye(Ld.shape[1]) + Yd @ Ld.T @ Bmat @ Ld)
    w = rng.standard_normal(Ld.shape[1])
    np.testing.assert_allclose(J(w), ref @ w, atol=1e-10)


def test_linear_composite_resolvent_singular_B(rng):
    Ld = rng.standard_normal((2, 3))
    Bmat = np.zeros((2, 2))
    J = linear_composite_resolvent(matrix_op(Ld), Metric.scalar(1.0, 3), Bmat)
    w = rng.standard_normal(3)
    np.testing.assert_allclose(J(w), w)


def test_drs_matches_sdr():
    for seed in range(5):
        assert sdr_vs_drs(seed, iters=100) <= 1e-10


# SADMM -------------------------------------------------------------------------------------

def test_sadmm_matches_sdr():
    for seed in range(5):
        assert sadmm_vs_sdr(seed, iters=50) <= 1e-9


def _scalar_sadmm():
    one = identity(1)
    return SadmmProblem(L1Norm(1.0), Quadratic(one, np.ones(1)), one, one,
                        Metric.scalar(1.0, 1), Metric.scalar(1.0, 1))


def _zero1():
    return SadmmState(np.zeros(1), np.zeros(1), np.zeros(1))


@pytest.mark.parametrize("step", [sadmm_step, explicit_split_step], ids=["sadmm", "explicit"])
def test_scalar_lasso_sadmm(step):
    """``min |p| + 1/2(p - 1)^2``: ``p = 0`` and multiplier ``x = -1``."""
    prob = _scalar_sadmm()
    rep = solve(lambda s: step(prob, s), _zero1(), StoppingRule(1e-14, 10_000))
    assert rep.converged
    assert abs(rep.state.p[0]) <= 1e-8 and abs(rep.state.x[0] + 1) <= 1e-8


def test_explicit_split_equals_sadmm_when_T_is_identity():
    prob = random_sadmm_problem(4)
    n_p, m = prob.T.in_dim, prob.T.out_dim
    K = prob.K
    g = Huber(0.8, np.linspace(-1, 1, m))
    p2 = SadmmProblem(g, prob.f, identity(m), K, prob.Y, prob.S)
    a = SadmmState(np.zeros(m), np.zeros(K.out_dim), np.zeros(K.out_dim))
    b = a
    for _ in range(20):
        a, b = sadmm_step(p2, a), explicit_split_step(p2, b)
        np.testing.assert_allclose(a.p, b.p, atol=1e-8)
        np.testing.assert_allclose(a.x, b.x, atol=1e-8)


def test_explicit_split_rejects_general_T():
    prob = random_sadmm_problem(0)
    with pytest.raises(ValueError):
        explicit_split_step(prob, SadmmState(np.zeros(prob.T.in_dim), np.zeros(prob.K.out_dim),
                                             np.zeros(prob.K.out_dim)))


def test_sadmm_objective_decreases_to_minimum():
    prob = random_sadmm_problem(5)
    s = SadmmState(np.zeros(prob.T.in_dim), np.zeros(prob.K.out_dim), np.zeros(prob.K.out_dim))
    # inner Newton solves stop at a relative 1e-10, which bounds the outer accuracy
    rep = solve(lambda t: sadmm_step(prob, t), s, StoppingRule(1e-9, 50_000))
    assert rep.converged
    p = rep.state.p
    F = prob.objective(p)
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert prob.objective(p + 1e-3 * rng.standard_normal(p.size)) >= F - 1e-9


def test_admm2_quadratics():
    """``min 1/2||y - a||^2 + 1/2||v - b||^2`` s.t. ``y = v``: ``y = (a + b)/2``."""
    n = 3
    a, b = np.array([1.0, -2.0, 0.5]), np.array([3.0, 0.0, 0.5])
    one = identity(n)
    prob = Admm2Problem(Quadratic(one, a), Quadratic(one, b), one, one, one * -1.0,
                        Metric.scalar(0.5, n), Metric.scalar(1.0, n))
    s = Admm2State(np.zeros(n), np.zeros(n), np.zeros(n))
    rep = solve(lambda t: admm2_step(prob, t), s, StoppingRule(1e-14, 10_000))
    np.testing.assert_allclose(rep.state.p, (a + b) / 2, atol=1e-8)
    np.testing.assert_allclose(rep.state.v, (a + b) / 2, atol=1e-8)


# driver ---------------------------------------------------------------------------------------

def test_relative_residual():
    assert relative_residual(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 5.0
    assert relative_residual((np.ones(1), np.ones(1)), (2 * np.ones(1), 2 * np.ones(1))) == pytest.approx(0.5)


def test_stopping_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule(-1.0)
    with pytest.raises(ValueError):
        StoppingRule(1e-6, 0)
    with pytest.raises(ValueError):
        StoppingRule(residual="bogus")


def test_tol_zero_runs_to_budget():
    inst = scalar_lasso()
    rep = solve(lambda s: sdr_step(inst.prob, s), SdrState(inst.x0, inst.u0), StoppingRule(0.0, 17))
    assert rep.iterations == 17 and rep.status == "max_iter"
    assert len(rep.residual_history) == 17


def test_kkt_stopping_and_histories():
    inst = scalar_lasso()
    p = inst.prob
    seen = []
    rep = solve(lambda s: sdr_step(p, s), SdrState(inst.x0, inst.u0), StoppingRule(1e-12, 50, "kkt"),
                residual=lambda s: kkt_residual(p.A, p.B, p.L, s.x, s.u),
                objective=lambda s: float(abs(s.x[0]) + 0.5 * (s.x[0] - 1) ** 2),
                callback=lambda k, old, new: seen.append(k))
    assert rep.converged and rep.iterations == 1
    assert rep.objective_history == [0.5] and seen == [1]
    with pytest.raises(ValueError):
        solve(lambda s: s, SdrState(inst.x0, inst.u0), StoppingRule(residual="kkt"))
