import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from splitdr.linops import Metric, identity, matrix_op
from splitdr.prox import (Box, Custom, DualComposite, Huber, Inverse, L1Norm, LinearMonotone,
                          Quadratic, SubproblemError, Zero, conjugate_resolvent, huber_grad,
                          huber_value, metric_prox, project_box, prox_huber,
                          resolvent_quadratic, soft_threshold, solve_composite)

floats = st.floats(-1e3, 1e3, allow_nan=False)
pos = st.floats(1e-3, 1e2)


def golden_min(fun, a, b):
    """Independent scalar minimizer (bounded Brent)."""
    return scipy.optimize.minimize_scalar(fun, bounds=(a, b), method="bounded",
                                          options={"xatol": 1e-12}).x


# closed forms ---------------------------------------------------------------------

def test_soft_threshold_examples():
    np.testing.assert_array_equal(soft_threshold([3.0, -0.5, 0.5, -2.0], 1.0), [2.0, 0.0, 0.0, -1.0])


def test_soft_threshold_rejects_negative_level():
    with pytest.raises(ValueError):
        soft_threshold([1.0], -1.0)


def test_project_box_examples_and_empty_box():
    np.testing.assert_array_equal(project_box([-3.0, 100.0, 300.0], 0, 255), [0.0, 100.0, 255.0])
    with pytest.raises(ValueError):
        project_box([0.0], 1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(x=floats, level=pos)
def test_soft_threshold_is_prox_of_l1(x, level):
    f = lambda y: level * abs(y) + 0.5 * (y - x) ** 2
    ref = golden_min(f, x - level - 1, x + level + 1)
    got = float(soft_threshold(x, level))
    assert f(got) <= f(ref) + 1e-9 * max(1.0, abs(f(ref)))
    assert got == pytest.approx(ref, abs=1e-4 * max(1.0, abs(x)))


@settings(max_examples=200, deadline=None)
@given(x=floats, gamma=pos, delta=pos, shift=st.floats(-10, 10))
def test_prox_huber_against_scalar_minimizer(x, gamma, delta, shift):
    f = lambda y: gamma * huber_value(y, delta, shift) + 0.5 * (y - x) ** 2
    lo, hi = min(x, shift) - 1, max(x, shift) + 1
    ref = golden_min(f, lo, hi)
    got = float(prox_huber(x, gamma, delta, shift))
    assert f(got) <= f(ref) + 1e-9 * max(1.0, abs(f(ref)))


def test_prox_huber_rejects_bad_parameters():
    with pytest.raises(ValueError):
        prox_huber(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        prox_huber(1.0, 1.0, -1.0)


def test_huber_value_and_grad():
    assert huber_value([0.5, 2.0], 1.0) == pytest.approx(0.125 + 1.5)
    np.testing.assert_allclose(huber_grad([0.5, 2.0, -3.0], 1.0), [0.5, 1.0, -1.0])


def test_huber_gradient_by_finite_differences(rng):
    h = Huber(0.7, shift=rng.standard_normal(6), scale=2.0)
    x = 3 * rng.standard_normal(6)
    e = 1e-6
    fd = [(h.value(x + e * v) - h.value(x - e * v)) / (2 * e) for v in np.eye(6)]
    np.testing.assert_allclose(h.gradient(x), fd, atol=1e-6)


# Moreau identities ---------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(x=st.lists(floats, min_size=1, max_size=8), tau=pos, a=pos)
def test_moreau_identity_l1(x, tau, a):
    """``x = J_{tau B}(x) + tau J_{B^-1/tau}(x/tau)``; ``B^-1`` is the normal cone of ``[-a, a]``."""
    x = np.array(x)
    n = x.size
    prox = L1Norm(a).resolvent(Metric.scalar(tau, n), x)
    dual = Inverse(L1Norm(a)).resolvent(Metric.scalar(1.0 / tau, n), x / tau)
    atol = 1e-9 * max(1.0, np.abs(x).max())
    np.testing.assert_allclose(prox + tau * dual, x, atol=atol)
    # independent: projection onto [-a, a], whatever the step
    np.testing.assert_allclose(dual, np.clip(x / tau, -a, a), atol=atol / tau)
    np.testing.assert_allclose(Inverse(L1Norm(a)).resolvent(Metric.scalar(tau, n), x),
                               np.clip(x, -a, a), atol=atol)


@settings(max_examples=100, deadline=None)
@given(x=st.lists(floats, min_size=1, max_size=6), tau=pos, a=pos)
def test_conjugate_resolvent_scalar(x, tau, a):
    x = np.array(x)
    got = conjugate_resolvent(L1Norm(a), tau, x)
    np.testing.assert_allclose(got, np.clip(x, -a, a), atol=1e-9 * max(1.0, np.abs(x).max()))


def test_metric_moreau_identity(rng):
    """``w = J_{M A}(w) + M J_{M^-1 A^-1}(M^-1 w)`` for diagonal ``M``."""
    for op in [L1Norm(0.8), Box(-1, 2), Huber(0.5, shift=0.3)]:
        for _ in range(20):
            d = rng.uniform(0.1, 5, 7)
            M = Metric.diagonal(d)
            w = 3 * rng.standard_normal(7)
            a = op.resolvent(M, w)
            b = M(Inverse(op).resolvent(M.inverse(), M.solve(w)))
            np.testing.assert_allclose(a + b, w, atol=1e-10)


def test_conjugate_resolvent_metric_matches_scalar(rng):
    x = rng.standard_normal(5)
    a = conjugate_resolvent(L1Norm(1.3), 0.4, x)
    b = conjugate_resolvent(L1Norm(1.3), Metric.scalar(0.4, 5), x)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_conjugate_resolvent_rejects_nonpositive():
    with pytest.raises(ValueError):
        conjugate_resolvent(L1Norm(), 0.0, np.ones(2))


# firm nonexpansiveness -----------------------------------------------------------------

@pytest.mark.parametrize("op", [L1Norm(0.6), Box(0, 1), Huber(0.3, scale=2.0), Zero()],
                         ids=["l1", "box", "huber", "zero"])
def test_resolvents_firmly_nonexpansive(op, rng):
    M = Metric.scalar(0.9, 5)
    for _ in range(200):
        x, y = 2 * rng.standard_normal(5), 2 * rng.standard_normal(5)
        px, py = op.resolvent(M, x), op.resolvent(M, y)
        assert np.sum((px - py) ** 2) <= np.dot(px - py, x - y) + 1e-12


# metric prox ----------------------------------------------------------------------------

def test_metric_prox_l1_diagonal(rng):
    """``argmin a||y||_1 + 1/2||y - w||^2_Y`` solved per coordinate by a scalar minimizer."""
    d = rng.uniform(0.2, 3, 4)
    w = 2 * rng.standard_normal(4)
    got = metric_prox(L1Norm(0.7), Metric.diagonal(d), w)
    for i in range(4):
        f = lambda y: 0.7 * abs(y) + 0.5 * d[i] * (y - w[i]) ** 2
        ref = golden_min(f, -10, 10)
        assert f(got[i]) <= f(ref) + 1e-12
        assert got[i] == pytest.approx(ref, abs=1e-5)


def test_nonsmooth_resolvent_rejects_dense_metric():
    M = Metric.dense(np.array([[2.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(NotImplementedError):
        L1Norm().resolvent(M, np.ones(2))


# quadratic resolvent --------------------------------------------------------------------

def test_resolvent_quadratic_dense_solve(rng):
    R = rng.standard_normal((6, 4))
    b = rng.standard_normal(6)
    w = rng.standard_normal(4)
    tau = 0.37
    ref = np.linalg.solve(np.eye(4) + tau * R.T @ R, w + tau * R.T @ b)
    np.testing.assert_allclose(resolvent_quadratic(matrix_op(R), b, tau, w), ref, rtol=1e-10)
    np.testing.assert_allclose(Quadratic(matrix_op(R), b).resolvent(Metric.scalar(tau, 4), w), ref,
                               rtol=1e-10)


def test_quadratic_resolvent_is_a_minimizer(rng):
    R = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    w = rng.standard_normal(3)
    tau = 2.0
    y = resolvent_quadratic(matrix_op(R), b, tau, w)
    f = lambda v: 0.5 * np.sum((R @ v - b) ** 2) + np.sum((v - w) ** 2) / (2 * tau)
    ref = scipy.optimize.minimize(f, w, method="BFGS", options={"gtol": 1e-12}).x
    np.testing.assert_allclose(y, ref, atol=1e-6)


def test_quadratic_resolvent_dense_metric(rng):
    R = rng.standard_normal((4, 3))
    b = rng.standard_normal(4)
    G = rng.standard_normal((3, 3))
    Md = G @ G.T + np.eye(3)
    w = rng.standard_normal(3)
    got = Quadratic(matrix_op(R), b).resolvent(Metric.dense(Md), w)
    # (Id + M R*R) y = w + M R* b
    np.testing.assert_allclose(got, np.linalg.solve(np.eye(3) + Md @ R.T @ R, w + Md @ R.T @ b), rtol=1e-9)


def test_resolvent_quadratic_rejects_bad_tau():
    with pytest.raises(ValueError):
        resolvent_quadratic(identity(2), np.zeros(2), 0.0, np.zeros(2))


def test_quadratic_rejects_wrong_b():
    with pytest.raises(ValueError):
        Quadratic(identity(3), np.zeros(2))


# linear, custom, inverse ----------------------------------------------------------------

def test_linear_monotone_resolvent(rng):
    S = np.array([[1.0, 2.0], [-2.0, 0.5]])
    c = np.array([0.3, -0.1])
    w = rng.standard_normal(2)
    y = LinearMonotone(S, c).resolvent(Metric.scalar(0.5, 2), w)
    np.testing.assert_allclose(y + 0.5 * (S @ y + c), w, atol=1e-12)


def test_linear_monotone_rejects_nonmonotone():
    with pytest.raises(ValueError):
        LinearMonotone(-np.eye(2))


def test_custom_resolvent_scalar_only():
    op = Custom(lambda t, w: w / (1 + t))
    np.testing.assert_allclose(op.resolvent(Metric.scalar(1.0, 2), np.ones(2)), [0.5, 0.5])
    with pytest.raises(NotImplementedError):
        op.resolvent(Metric.diagonal([1.0, 2.0]), np.ones(2))


def test_inverse_of_inverse_is_base():
    op = L1Norm()
    assert Inverse(op).inverse() is op


# composite subproblem -------------------------------------------------------------------

def test_solve_composite_scalar_T_is_a_prox():
    p, it = solve_composite(L1Norm(1.0), identity(1) * 2.0, Metric.scalar(1.0, 1), np.array([6.0]))
    # argmin |p| + 1/2 (2p - 6)^2  ->  p = 3 - 1/4
    assert it == 0 and p[0] == pytest.approx(2.75)


def test_solve_composite_huber_general_T(rng):
    T = rng.standard_normal((5, 5)) + 3 * np.eye(5)
    c = rng.standard_normal(5)
    g = Huber(0.2, shift=rng.standard_normal(5))
    W = Metric.scalar(0.8, 5)
    p, _ = solve_composite(g, matrix_op(T), W, c)
    f = lambda q: g.value(q) + 0.4 * np.sum((T @ q - c) ** 2)
    ref = scipy.optimize.minimize(f, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
    assert f(p) <= f(ref) + 1e-9
    np.testing.assert_allclose(g.gradient(p) + 0.8 * T.T @ (T @ p - c), 0, atol=1e-8)


def test_solve_composite_nonsmooth_general_T_not_supported(rng):
    with pytest.raises(NotImplementedError):
        solve_composite(L1Norm(), matrix_op(rng.standard_normal((2, 2))), Metric.scalar(1, 2), np.ones(2))


def test_solve_composite_budget_error():
    T = matrix_op(np.array([[1.0, 0.0], [0.0, 1e-4]]))
    with pytest.raises(SubproblemError):
        solve_composite(Huber(1e-6, shift=0.0), T, Metric.scalar(1, 2), np.array([5.0, 3.0]),
                        tol=0.0, max_iter=1)


def test_dual_composite_matches_inverse_for_identity_T(rng):
    """With ``T = -Id`` the dual composite is ``(dg)^-1`` composed with ``-Id`` twice, i.e. ``(dg)^-1``."""
    g = Huber(0.5, shift=0.2)
    M = Metric.scalar(0.7, 4)
    w = rng.standard_normal(4)
    a = DualComposite(g, identity(4) * -1.0).resolvent(M, w)
    b = Inverse(g).resolvent(M, w)
    np.testing.assert_allclose(a, b, atol=1e-10)
