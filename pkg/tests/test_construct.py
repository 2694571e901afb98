import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothnet import activations as A
from smoothnet import analysis as an
from smoothnet import construct as cs
from smoothnet import netcore as nc
from smoothnet import partition as P
from smoothnet.errors import BudgetInfeasible, DerivativeOracleMissing, PreconditionFailed
from smoothnet.partition import GridSpec, Level

ACTS = [A.SIGMOID, A.GELU]


@pytest.fixture(scope="module", params=ACTS, ids=lambda a: a.name)
def act_ref(request):
    act = request.param
    return act, A.find_reference_point(act, 4)


def _line(lo, hi, n=20001):
    return np.linspace(lo, hi, n).reshape(-1, 1)


# ----------------------------------------------------------------- b_m_sum

def test_b_m_sum_examples():
    assert cs.b_m_sum((2, 3), 1) == 0
    assert cs.b_m_sum((2, 3), 2) == 12
    assert cs.b_m_sum((5,), 1) == 5


@settings(max_examples=200, deadline=None)
@given(q=st.lists(st.floats(-3, 3), min_size=1, max_size=5), k=st.integers(0, 5))
def test_b_m_sum_identity(q, k):
    m = len(q)
    v = cs.b_m_sum(q, k)
    scale = max(1.0, 3.0**k * m**k)
    if k < m:
        assert abs(v) <= 1e-9 * scale
    elif k == m:
        assert abs(v - math.factorial(m) * np.prod(q)) <= 1e-9 * scale


# ----------------------------------------------------------------- monomials

def test_monomial_identity_unit(act_ref):
    act, ref = act_ref
    net = cs.build_monomial(act, ref, (1,), 1.0, 0.05)
    assert (net.depth, net.width) == (2, 2)
    X = _line(-1, 1, 10001)
    assert np.max(np.abs(net(X).ravel() - X.ravel())) <= 0.05


def test_monomial_product_vanishes_on_axis(act_ref):
    act, ref = act_ref
    eps = 0.02
    net = cs.build_monomial(act, ref, (1, 1), 1.0, eps)
    X = np.column_stack([np.zeros(201), np.linspace(-1, 1, 201)])
    assert np.max(np.abs(net(X))) <= eps


def test_monomial_21(act_ref):
    act, ref = act_ref
    net = cs.build_monomial(act, ref, (2, 1), 1.0, 0.01)
    assert net.width == 8 and net.depth == 2
    g = np.linspace(-1, 1, 201)
    X = np.array(list(itertools.product(g, g)))
    assert np.max(np.abs(net(X).ravel() - X[:, 0] ** 2 * X[:, 1])) <= 0.01


def test_monomial_linf_reported(act_ref):
    act, ref = act_ref
    net = cs.build_monomial(act, ref, (1, 1, 1), 2.0, 0.01)
    assert nc.norms(net).linf <= net.meta["linf"] * (1 + 1e-12)


def test_identity(act_ref):
    act, ref = act_ref
    net = cs.build_identity(act, ref, 1.0, 0.01, 2)
    X = _line(-1, 1)
    assert np.max(np.abs(net(X).ravel() - X.ravel())) <= 0.01
    assert abs(net([0.3])[0] - 0.3) <= 0.01 and abs(net([0.0])[0]) <= 0.01
    deep = cs.build_identity(act, ref, 1.0, 0.01, 4)
    assert deep.depth == 4 and deep.width == 2
    assert np.max(np.abs(deep(X).ravel() - X.ravel())) <= 0.01


# ----------------------------------------------------------------- indicators

@pytest.mark.parametrize("act", A.SMOOTH, ids=lambda a: a.name)
def test_indicator_1d(act):
    a, b, delta, eps = 0.0, 1.0, 0.1, 0.01
    net = cs.build_indicator_1d(act, a, b, delta, eps)
    assert net.depth == 2
    assert net.width == (2 if act.tail_class is A.TailClass.HEAVISIDE_LIKE else 4)
    X = _line(-5, 6, 110001)
    x = X.ravel()
    g = net(X).ravel()
    off = ~(((x >= a) & (x <= a + delta)) | ((x >= b - delta) & (x <= b)))
    ind = ((x >= a) & (x < b)).astype(float)
    assert np.max(np.abs(g - ind)[off]) <= eps
    assert abs(net([0.5])[0] - 1) <= eps and abs(net([-5.0])[0]) <= eps
    C = act.tail_constant
    bound = 2 * (C + 1) if act.tail_class is A.TailClass.HEAVISIDE_LIKE else 2.0
    assert np.max(np.abs(g)) <= bound


def test_coarse_indicators_1d(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.02)
    net = cs.build_coarse_indicators(act, ref, grid, 0.05)
    assert net.depth == 3 and net.d_out == 2
    assert net.width <= 2 ** 2 * 2
    np.testing.assert_allclose(net([0.25]), [1, 0], atol=0.05)
    np.testing.assert_allclose(net([0.75]), [0, 1], atol=0.05)
    X = _line(0, 1)
    off = P.interior_mask(grid, X, Level.COARSE)
    want = np.column_stack([X.ravel() < 0.5, X.ravel() >= 0.5]).astype(float)
    assert np.max(np.abs(net(X) - want)[off]) <= 0.05


def test_coarse_indicators_2d_bounded(act_ref):
    act, ref = act_ref
    grid = GridSpec(2, 2, 0.02)
    net = cs.build_coarse_indicators(act, ref, grid, 0.1)
    C = act.tail_constant if act.tail_class is A.TailClass.HEAVISIDE_LIKE else 0.0
    X = np.random.default_rng(0).random((5000, 2)) * 1.4 - 0.2
    assert np.max(np.abs(net(X))) <= 2 ** 3 * (1 + C) ** 2


def test_coarse_pwc(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.02)
    c = np.array([[0.3, 0.3], [-0.7, -0.7]])
    spec = cs.PiecewiseConstantSpec(grid, c)
    eps = 0.05
    net = cs.build_coarse_pwc(act, ref, spec, eps)
    assert net.depth == 3 and net.d_out == 2
    np.testing.assert_allclose(net([0.25]), [0.3, 0.3], atol=eps)
    np.testing.assert_allclose(net([0.75]), [-0.7, -0.7], atol=eps)
    # exterior points: every indicator is off
    ext = np.array([[-3.0], [-0.5], [1.5], [4.0]])
    assert np.max(np.abs(net(ext))) <= eps
    const = cs.build_coarse_pwc(act, ref, cs.PiecewiseConstantSpec(grid, np.full((2, 2), 0.4)), eps)
    X = _line(0, 1)
    off = P.interior_mask(grid, X, Level.COARSE)
    assert np.max(np.abs(const(X)[off] - 0.4)) <= eps


def test_relative_position(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.02)
    eps = 0.02
    net = cs.build_relative_position(act, ref, grid, eps)
    assert net.depth == 2 and net.width <= 6 * 1 * 2
    assert abs(net([0.75])[0] - 0.25) <= eps and abs(net([0.25])[0] - 0.25) <= eps
    X = _line(0, 1)
    off = P.interior_mask(grid, X, Level.COARSE)
    x = X.ravel()
    want = x - (P.coarse_index_array(grid, X).ravel() - 1) / 2
    assert np.max(np.abs(net(X).ravel() - want)[off]) <= eps


def test_refined_indicators(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.01)
    eps = 0.1
    net = cs.build_refined_indicators(act, ref, grid, eps)
    assert net.depth == 4 and net.d_out == 2
    np.testing.assert_allclose(net([0.3]), [0, 1], atol=eps / 2)
    X = _line(0, 1)
    inside = P.interior_mask(grid, X, Level.REFINED)
    j = P.refined_index_array(grid, X)[1].ravel()
    want = np.column_stack([j == 1, j == 2]).astype(float)
    G = net(X)
    assert np.max(np.abs(G - want)[inside]) <= eps / 2
    assert np.all(np.argmax(G[inside], axis=1) == j[inside] - 1)
    C = act.tail_constant if act.tail_class is A.TailClass.HEAVISIDE_LIKE else 0.0
    R = np.random.default_rng(1).random((1000, 1))
    assert np.max(np.sum(np.abs(net(R)), axis=1)) <= 2 ** 3 * (1 + C)


def _pwc_check(act, ref, grid, c, eps):
    spec = cs.PiecewiseConstantSpec(grid, c)
    net = cs.build_refined_pwc(act, ref, spec, eps)
    err, _ = an.sup_error_on_grid(net, lambda X: P.pwc_direct(grid, c, X),
                                  lambda X: P.interior_mask(grid, X, Level.REFINED), grid.delta / 10, grid.d)
    return net, err


def test_refined_pwc_example(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.01)
    c = np.array([[1.0, 2.0], [3.0, 4.0]])
    net, err = _pwc_check(act, ref, grid, c, 0.1)
    assert err <= 0.1 and net.depth == 5
    assert abs(net([0.1])[0] - 1) <= 0.1 and abs(net([0.6])[0] - 3) <= 0.1
    d, K = 1, 2
    assert net.width <= 2 ** (d + 3) * K**d
    C = act.tail_constant if act.tail_class is A.TailClass.HEAVISIDE_LIKE else 0.0
    R = np.random.default_rng(2).random((1000, 1))
    assert np.max(np.abs(net(R))) <= 4.0 * 4 ** (d + 3) * (1 + C) ** (2 * d)


def test_refined_pwc_constant(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 3, 0.005)
    _, err = _pwc_check(act, ref, grid, np.full((3, 3), -0.6), 0.05)
    assert err <= 0.05


def test_piecewise_monomial(act_ref):
    act, ref = act_ref
    grid = GridSpec(1, 2, 0.01)
    pred = lambda X: P.interior_mask(grid, X, Level.REFINED)  # noqa: E731
    one = cs.PiecewiseConstantSpec(grid, np.ones((2, 2)))
    net = cs.build_piecewise_monomial(act, ref, one, (1,), 0.05)
    assert net.depth == 6
    err, _ = an.sup_error_on_grid(net, lambda X: X[:, 0], pred, 1e-3)
    assert err <= 0.05
    zero = cs.PiecewiseConstantSpec(grid, np.zeros((2, 2)))
    net0 = cs.build_piecewise_monomial(act, ref, zero, (1,), 0.05)
    err0, _ = an.sup_error_on_grid(net0, lambda X: np.zeros(X.shape[0]), pred, 1e-3)
    assert err0 <= 0.05
    c = np.random.default_rng(3).uniform(-1, 1, (2, 2))
    sq = cs.PiecewiseConstantSpec(grid, c)
    net2 = cs.build_piecewise_monomial(act, ref, sq, (2,), 0.05)
    err2, _ = an.sup_error_on_grid(net2, lambda X: P.pwc_direct(grid, c, X) * X[:, 0] ** 2, pred, 1e-3)
    assert err2 <= 0.05
    with pytest.raises(PreconditionFailed):
        cs.build_piecewise_monomial(act, ref, sq, (0,), 0.05)


# ------------------------------------------------------ local polynomials

def test_local_polynomial_of_quadratic():
    grid = GridSpec(1, 2, 0.01)
    poly = cs.local_polynomial_coeffs(cs.half_square(), 2, grid)
    c0 = poly.coeffs[cs.MultiIndex((0,))][0, 0]
    c1 = poly.coeffs[cs.MultiIndex((1,))][0, 0]
    assert c1 == pytest.approx(0.125, abs=1e-15) and c0 == pytest.approx(-0.0078125, abs=1e-15)


def test_local_polynomial_of_constant():
    poly = cs.local_polynomial_coeffs(cs.constant_target(0.7), 3, GridSpec(1, 3, 0.001))
    for a, c in poly.coeffs.items():
        np.testing.assert_array_equal(c, 0.7 if a.order == 0 else 0.0)


@pytest.mark.parametrize("mode", ["taylor", "averaged"])
def test_local_polynomial_sine_remainder(mode):
    K = 4
    grid = GridSpec(1, K, 0.001)
    f = cs.TargetFunction(1, lambda X: np.sin(2 * np.pi * X[:, 0]),
                          lambda a, X: (2 * np.pi) ** a.order * np.sin(2 * np.pi * X[:, 0] + a.order * np.pi / 2),
                          (2 * np.pi) ** 2, 10)
    poly = cs.local_polynomial_coeffs(f, 2, grid, mode)
    X = _line(0, 1, 100001)
    err = np.max(np.abs(poly.evaluate(X) - f(X)))
    # Lagrange remainder around the cell centre, and twice that for the averaged polynomial
    bound = (2 * np.pi) ** 2 * (K**-2) ** 2 / 8
    assert err <= bound * (1 if mode == "taylor" else 2)


def test_local_polynomial_needs_derivatives():
    f = cs.TargetFunction(1, lambda X: X[:, 0], None, 1.0, 0)
    with pytest.raises(DerivativeOracleMissing):
        cs.local_polynomial_coeffs(f, 2, GridSpec(1, 2, 0.01))


# ------------------------------------------------------- L2 approximator

def _mc(net, f, d=1):
    return an.mc_l2_error(net, f, 10**5, seed=0, d=d)[0]


def test_l2_sine(act_ref):
    act, ref = act_ref
    f = cs.normalized_sine(2, 1)
    net, budget = cs.build_l2_approximator(act, ref, f, 2, 0.1)
    assert net.depth == 6
    assert _mc(net, f) <= 0.1
    assert budget.K == cs.schedule_K(budget.C_cal, 0.1, 2)


def test_l2_constant(act_ref):
    act, ref = act_ref
    f = cs.constant_target(0.5)
    net, _ = cs.build_l2_approximator(act, ref, f, 2, 0.1)
    assert _mc(net, f) <= 0.1


def test_l2_schedule_arithmetic():
    for C, eps, s in [(32, 0.1, 2), (32, 0.05, 2), (1, 0.2, 1), (4, 0.01, 1.5)]:
        K = cs.schedule_K(C, eps, s)
        assert K >= (C / eps) ** (1 / (2 * s)) - 1e-9 and K - 1 < (C / eps) ** (1 / (2 * s))
    # halving eps multiplies the unrounded K by 2^(1/2s)
    r = (32 / 0.05) ** 0.25 / (32 / 0.1) ** 0.25
    assert r == pytest.approx(2 ** 0.25)


def test_l2_overflow_gate():
    ref = A.find_reference_point(A.SIGMOID, 4)
    with pytest.raises(BudgetInfeasible) as exc:
        cs.build_l2_approximator(A.SIGMOID, ref, cs.normalized_sine(1, 1), 1, 1e-9)
    assert "l2_approximator" in exc.value.stage


def test_calibration_below_certified_rejected():
    ref = A.find_reference_point(A.SIGMOID, 4)
    with pytest.raises(PreconditionFailed):
        cs.build_l2_approximator(A.SIGMOID, ref, cs.normalized_sine(2, 1), 2, 0.1, C_cal=1e-6)


def test_pwc_spec_validation():
    g = GridSpec(1, 2, 0.01)
    with pytest.raises(ValueError):
        cs.PiecewiseConstantSpec(g, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        cs.PiecewiseConstantSpec(g, np.full((2, 2), np.nan))
    with pytest.raises(ValueError):
        cs.PiecewiseConstantSpec(g, np.ones((2, 2)), c_max=0.5)


def test_multi_index_ordering():
    ms = cs.MultiIndex.all_below(2, 3)
    assert [m.alpha for m in ms] == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    with pytest.raises(ValueError):
        cs.MultiIndex((-1,))
