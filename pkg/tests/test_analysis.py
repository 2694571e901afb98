import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothnet import activations as A
from smoothnet import analysis as an
from smoothnet import netcore as nc
from smoothnet.errors import DegenerateInput, EmptyRegion, PreconditionFailed


def f(X):
    return np.sin(3 * X[:, 0])


def test_sup_error_exact_and_offset():
    err, _ = an.sup_error_on_grid(f, f, None, 1e-3)
    assert err == 0.0
    err, w = an.sup_error_on_grid(lambda X: f(X) + 0.01, f, None, 1e-3)
    assert err == pytest.approx(0.01, abs=1e-15) and w.shape == (1,)


def test_sup_error_predicate_and_witness():
    bump = lambda X: np.where(np.abs(X[:, 0] - 0.5) < 0.05, 1.0, 0.0)  # noqa: E731
    err, w = an.sup_error_on_grid(bump, lambda X: np.zeros(len(X)), None, 1e-3)
    assert err == 1.0 and abs(w[0] - 0.5) < 0.05
    err, _ = an.sup_error_on_grid(bump, lambda X: np.zeros(len(X)), lambda X: np.abs(X[:, 0] - 0.5) > 0.1, 1e-3)
    assert err == 0.0
    with pytest.raises(EmptyRegion):
        an.sup_error_on_grid(f, f, lambda X: X[:, 0] > 2, 1e-2)


def test_grid_has_endpoints():
    X = an._grid_points(2, 0.3)
    assert X.min() == 0.0 and X.max() == 1.0
    assert np.max(np.diff(np.unique(X[:, 0]))) <= 0.3


def test_mc_l2():
    assert an.mc_l2_error(f, f, 10**4) == (0.0, 0.0)
    est, se = an.mc_l2_error(lambda X: f(X) + 0.2, f, 10**5)
    assert abs(est - 0.2) <= 3 * se + 1e-12
    # a non-constant deviation |x|: L2 norm on [0,1] is 1/sqrt(3)
    est, se = an.mc_l2_error(lambda X: X[:, 0], lambda X: np.zeros(len(X)), 10**5, seed=7)
    assert abs(est - 1 / math.sqrt(3)) <= 3 * se
    assert an.mc_l2_error(lambda X: X[:, 0], lambda X: 0 * X[:, 0], 10**4, seed=1) == \
        an.mc_l2_error(lambda X: X[:, 0], lambda X: 0 * X[:, 0], 10**4, seed=1)
    with pytest.raises(PreconditionFailed):
        an.mc_l2_error(f, f, 100)


def test_fit_log_slope():
    s, _, r2 = an.fit_log_slope([(1, 1), (10, 0.1), (100, 0.01)])
    assert s == pytest.approx(-1, abs=1e-12) and r2 == pytest.approx(1, abs=1e-12)
    s, _, _ = an.fit_log_slope([(1, 2), (10, 2)])
    assert s == pytest.approx(0, abs=1e-15)
    with pytest.raises(DegenerateInput):
        an.fit_log_slope([(1, 1)])
    with pytest.raises(DegenerateInput):
        an.fit_log_slope([(1, 1), (2, -1)])


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-4, 4), c=st.floats(0.1, 10))
def test_fit_recovers_power_law(a, c):
    xs = [1, 2, 5, 11, 30]
    s, b, r2 = an.fit_log_slope([(x, c * x**a) for x in xs])
    assert s == pytest.approx(a, abs=1e-9) and b == pytest.approx(math.log(c), abs=1e-9)


def test_rows_to_csv_excludes_runtime(tmp_path):
    rows = [an.ScalingRow(0.1, 0.05, 10, 6, 3.5, 123), an.ScalingRow(0.05, 0.01, 20, 6, 4.0, 456)]
    text = an.rows_to_csv(rows, tmp_path / "s.csv", exclude=("runtime_ms",))
    assert text.splitlines()[0] == "control,measured_error,width,depth,linf_norm"
    assert text.splitlines()[1] == "0.10000000000000001,0.050000000000000003,10,6,3.5"
    assert (tmp_path / "s.csv").read_bytes() == text.encode()
    with pytest.raises(ValueError):
        an.ScalingRow(0.1, -1.0, 1, 1, 1.0, 0)


def test_single_relu_profile():
    net = nc.Network(A.RELU, (([[1.0]], [-0.5]), ([[1.0]], [0.0])))
    prof = an.extract_pwl_profile(net)
    assert prof.breakpoints == (0.5,) and prof.n_pieces == 2


def _dense_pieces(net, n=200001):
    """Count slope changes on a dense grid (independent of breakpoint propagation)."""
    x = np.linspace(0, 1, n)
    y = net(x.reshape(-1, 1)).ravel()
    s = np.diff(y) / np.diff(x)
    change = np.abs(np.diff(s)) > 1e-6 * max(1.0, np.max(np.abs(s)))
    # a kink between grid points shows up in one or two consecutive differences
    idx = np.flatnonzero(change)
    return 1 + int(np.sum(np.diff(idx) > 1)) + (1 if idx.size else 0)


@pytest.mark.parametrize("seed", range(20))
def test_profile_matches_network(seed):
    rng = np.random.default_rng(seed)
    net = an.random_relu_net(rng, 3, 4)
    prof = an.extract_pwl_profile(net)
    x = rng.random(10**4)
    np.testing.assert_allclose(prof(x), net(x.reshape(-1, 1)).ravel(), atol=1e-10, rtol=0)


def test_depth2_piece_bound():
    rng = np.random.default_rng(0)
    for _ in range(100):
        M = int(rng.integers(1, 9))
        assert an.extract_pwl_profile(an.random_relu_net(rng, 2, M)).n_pieces <= M + 1


def test_depth3_width2_against_dense_grid():
    rng = np.random.default_rng(1)
    for _ in range(100):
        net = an.random_relu_net(rng, 3, 2)
        prof = an.extract_pwl_profile(net).merged()
        assert prof.n_pieces <= 9
        assert prof.n_pieces == _dense_pieces(net)


def test_best_linear_error_exact():
    assert an.best_linear_sq_error(1) == pytest.approx(1 / 180, rel=1e-15)
    assert an.best_linear_sq_error(1, 0.5) == pytest.approx(1 / 720, rel=1e-15)
    assert an.best_linear_sq_error(2) == pytest.approx(32 / 180, rel=1e-15)


def test_best_linear_error_by_least_squares():
    # exact rational projection of x^2 onto span{1, x} on [0, 1]
    G = [[Fraction(1), Fraction(1, 2)], [Fraction(1, 2), Fraction(1, 3)]]
    rhs = [Fraction(1, 3), Fraction(1, 4)]
    det = G[0][0] * G[1][1] - G[0][1] ** 2
    b = (rhs[0] * G[1][1] - rhs[1] * G[0][1]) / det
    a = (G[0][0] * rhs[1] - G[0][1] * rhs[0]) / det
    err = Fraction(1, 5) - (b * rhs[0] + a * rhs[1])
    assert err == Fraction(1, 180)
    assert an.best_linear_sq_error(1) == float(err)


def test_dp_oracle():
    assert an.best_pwl_sq_error_dp(1, 1024) == pytest.approx(1 / 720, rel=1e-9)
    v = an.best_pwl_sq_error_dp(2, 1024)
    assert abs(v - 1 / 11520) <= 0.01 / 11520
    assert math.sqrt(v) == pytest.approx(0.009317, abs=1e-5)
    pts = [(K, math.sqrt(an.best_pwl_sq_error_dp(K, 2048))) for K in (2, 4, 8, 16)]
    s, _, _ = an.fit_log_slope(pts)
    assert s == pytest.approx(-2, abs=0.02)


def test_lower_bound_formulas():
    assert an.relu_lower_bound_value(2, 2) == pytest.approx(1 / (12 * math.sqrt(5)) / 9, rel=1e-15)
    assert an.relu_lower_bound_value(2, 2) == pytest.approx(0.0041409, abs=1e-7)
    assert an.prop61_exponent(4, 2) == -4
    assert an.prop61_exponent(3, 5) == -4
    assert an.piece_count_bound(3, 4) == 64
