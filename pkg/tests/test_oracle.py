import numpy as np
import pytest
import scipy.optimize

from splitdr.experiments.huber import build_huber
from splitdr.linops import matrix_op
from splitdr.oracle import (CertificationError, CompositeProblem, OracleConfig, Term,
                            dense_kkt, finite_difference_check, huber_l1_problem,
                            improvement_pct, oracle_solve, proximal_gradient,
                            quadratic_problem, scalar_lasso_problem, subgradient_check)
from splitdr.prox import Box, Huber, L1Norm, Quadratic


@pytest.mark.parametrize("method", ["dense_kkt", "proximal_gradient"])
def test_scalar_lasso(method):
    x, F = oracle_solve(scalar_lasso_problem(), OracleConfig(method))
    assert abs(x[0]) <= 1e-12 and F == pytest.approx(0.5, abs=1e-12)


def test_subgradient_residuals_scalar_lasso():
    p = scalar_lasso_problem()
    # at 0: 0 in [-1, 1] + (0 - 1); at 1: 1 + 0 = 1
    assert subgradient_check(p, [0.0]) == pytest.approx(0.0, abs=1e-14)
    assert subgradient_check(p, [1.0]) == pytest.approx(1.0, abs=1e-12)


def test_subgradient_check_outside_box_is_infinite():
    p = CompositeProblem(Quadratic(matrix_op(np.eye(2)), np.zeros(2)), [Term(Box(0, 1))], 2)
    assert subgradient_check(p, [2.0, 0.5]) == np.inf


def test_quadratic_problem_least_squares(rng):
    R = rng.standard_normal((6, 3))
    b = rng.standard_normal(6)
    x, F = oracle_solve(quadratic_problem(R, b), OracleConfig("dense_kkt"))
    ref = np.linalg.lstsq(R, b, rcond=None)[0]
    np.testing.assert_allclose(x, ref, atol=1e-10)
    assert F == pytest.approx(0.5 * np.sum((R @ ref - b) ** 2))


def test_box_constrained_least_squares(rng):
    R = rng.standard_normal((5, 4))
    b = 3 * rng.standard_normal(5)
    p = CompositeProblem(Quadratic(matrix_op(R), b), [Term(Box(-0.5, 0.5))], 4)
    x, _ = oracle_solve(p, OracleConfig("dense_kkt"))
    ref = scipy.optimize.lsq_linear(R, b, bounds=(-0.5, 0.5), method="bvls", tol=1e-14).x
    np.testing.assert_allclose(x, ref, atol=1e-9)


@pytest.mark.parametrize("cls", ["A", "B", "C"])
def test_methods_agree_on_huber(cls):
    prob = build_huber(20, cls, seed=1)
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    xa, Fa = oracle_solve(cp, OracleConfig("dense_kkt"))
    xb, Fb = oracle_solve(cp, OracleConfig("proximal_gradient"))
    assert Fa == pytest.approx(Fb, rel=1e-10, abs=1e-14)
    np.testing.assert_allclose(xa, xb, atol=1e-8 * max(1.0, np.abs(xa).max()))


def test_huber_lasso_against_generic_solver(rng):
    M = rng.standard_normal((4, 4))
    z = rng.standard_normal(4)
    cp = huber_l1_problem(M, z, 0.3, 0.7)
    x, F = oracle_solve(cp, OracleConfig("dense_kkt"))
    ref = scipy.optimize.minimize(cp.value, z, method="Nelder-Mead",
                                  options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20_000})
    assert F <= ref.fun + 1e-10


def test_proximal_gradient_budget():
    prob = build_huber(20, "C", seed=0)
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    _, iters, converged = proximal_gradient(cp, tol=1e-14, max_iter=5)
    assert iters == 5 and not converged


def test_certification_error_on_budget():
    prob = build_huber(20, "A", seed=0)
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    with pytest.raises(CertificationError) as exc:
        oracle_solve(cp, OracleConfig("proximal_gradient", tol=1e-12, max_iter=3))
    assert exc.value.residual > 0


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig("newton")
    with pytest.raises(ValueError):
        OracleConfig(tol=0.0)
    with pytest.raises(ValueError):
        OracleConfig(max_iter=0)


def test_unsupported_pieces():
    with pytest.raises(TypeError):
        Term(Huber())
    with pytest.raises(TypeError):
        CompositeProblem(L1Norm(), [], 1)
    with pytest.raises(ValueError):
        CompositeProblem(Huber(), [Term(L1Norm(), np.ones((2, 3)))], 2)


def test_dense_kkt_returns_certified_point(rng):
    prob = build_huber(15, "B", seed=6)
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    x = dense_kkt(cp)
    assert subgradient_check(cp, x) <= 1e-9


def test_finite_difference_check(rng):
    R = rng.standard_normal((3, 3))
    assert finite_difference_check(Quadratic(matrix_op(R), rng.standard_normal(3)),
                                   rng.standard_normal(3)) <= 1e-7
    assert finite_difference_check(Huber(0.5, shift=0.1), 2 * rng.standard_normal(5)) <= 1e-6


def test_improvement_pct():
    assert improvement_pct(2.0, 1.0) == 50.0
    assert improvement_pct(2.0, 3.0) == -50.0
    assert improvement_pct(0.0, 0.0) == 0.0
    assert improvement_pct(0.0, 1.0) == -np.inf


def test_improvement_against_itself_is_zero():
    prob = build_huber(12, "B", seed=2)
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    _, F = oracle_solve(cp, OracleConfig("dense_kkt"))
    assert abs(improvement_pct(F, F)) <= 1e-10


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_solver_output_passes_certificate(eta):
    from splitdr.experiments.huber import run_huber
    from splitdr.solvers import StoppingRule
    prob = build_huber(12, "B", seed=3)
    rep = run_huber(prob, eta, StoppingRule(1e-10, 100_000))
    cp = huber_l1_problem(prob.M, prob.z, prob.alpha, prob.delta)
    p = rep.state.p
    ztol = 1e-6 * max(1.0, float(np.abs(prob.M @ p).max()))
    assert subgradient_check(cp, p, ztol=ztol) <= 1e-5
