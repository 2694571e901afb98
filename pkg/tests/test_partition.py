import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothnet import partition as P
from smoothnet.errors import IndexOutOfRange, OutOfDomain
from smoothnet.partition import GridSpec, Level


def test_coarse_index_examples():
    g1 = GridSpec(1, 2, 0.01)
    assert P.coarse_index(g1, 0.25) == (1,)
    assert P.coarse_index(g1, 0.75) == (2,)
    assert P.coarse_index(g1, 1.0) == (2,)  # right boundary clamps to cell K
    assert P.coarse_index(GridSpec(2, 2, 0.01), (0.1, 0.9)) == (1, 2)
    with pytest.raises(OutOfDomain):
        P.coarse_index(g1, 1.5)


@settings(max_examples=200, deadline=None)
@given(K=st.integers(1, 9), x=st.lists(st.floats(0, 1), min_size=2, max_size=2))
def test_coarse_index_matches_floor_oracle(K, x):
    g = GridSpec(2, K, 0.1 / K**2)
    want = tuple(min(math.floor(K * v) + 1, K) for v in x)
    assert P.coarse_index(g, x) == want
    assert tuple(P.coarse_index_array(g, np.array([x]))[0]) == want


@settings(max_examples=200, deadline=None)
@given(K=st.integers(1, 6), x=st.floats(0, 1))
def test_refined_index_consistent_with_coarse(K, x):
    g = GridSpec(1, K, 0.1 / K**2)
    i, j = P.refined_index(g, x)
    assert i == P.coarse_index(g, x)
    lo = (i[0] - 1) / K + (j[0] - 1) / K**2
    assert lo <= x + 1e-15 and (x < lo + 1 / K**2 + 1e-15)


def test_corner():
    assert P.corner(GridSpec(1, 2, 0.01), (2,)).tolist() == [0.5]
    assert P.corner(GridSpec(3, 3, 0.01), (1, 1, 1)).tolist() == [0, 0, 0]
    assert P.corner(GridSpec(2, 4, 0.01), (3, 1)).tolist() == [0.5, 0.0]
    with pytest.raises(IndexOutOfRange):
        P.corner(GridSpec(1, 2, 0.01), (3,))


def test_interior_examples():
    assert P.in_interior(GridSpec(1, 2, 0.02), 0.25, Level.COARSE)
    assert not P.in_interior(GridSpec(1, 2, 0.01), 0.49, Level.COARSE)
    assert P.in_band(GridSpec(1, 2, 0.01), 0.5, Level.COARSE)
    assert P.in_band(GridSpec(1, 2, 0.01), 0.0, Level.COARSE)


def test_interior_is_open():
    g = GridSpec(1, 2, 0.0625)
    assert P.in_band(g, 0.5 - 0.0625, Level.COARSE)
    assert P.in_interior(g, 0.5 - 0.0625 - 1e-9, Level.COARSE)


def test_band_measure_1d():
    r = P.band_measure(GridSpec(1, 2, 0.01), Level.REFINED, n_samples=10**6)
    assert r.exact == pytest.approx(0.08, abs=1e-15)
    assert abs(r.monte_carlo - r.exact) <= 4 * r.mc_stderr
    assert P.band_measure(GridSpec(1, 2, 1e-12), n_samples=10**4).exact < 1e-10


@pytest.mark.parametrize("d,K,delta", [(d, K, f / (3 * K * K))
                                       for d in (1, 2, 3) for K in (1, 2, 3) for f in (0.05, 0.5, 0.9)])
def test_theory_band_bound_dominates(d, K, delta):
    r = P.band_measure(GridSpec(d, K, delta), n_samples=10**4)
    assert r.theory_bound >= r.exact


def test_band_measure_exact_vs_mc_2d():
    r = P.band_measure(GridSpec(2, 3, 0.01), Level.REFINED, n_samples=10**6, seed=3)
    assert abs(r.monte_carlo - r.exact) <= 4 * r.mc_stderr


@settings(max_examples=100, deadline=None)
@given(K=st.integers(1, 6), frac=st.floats(0.01, 0.99), seed=st.integers(0, 1000))
def test_shifted_interiors_cover_domain(K, frac, seed):
    g = GridSpec(2, K, frac / (4 * K * K))
    X = np.random.default_rng(seed).random((500, 2))
    assert np.all(P.shifted_cover_count(g, X) >= 1)


@pytest.mark.parametrize("d,K", [(1, 2), (1, 4), (2, 2), (2, 3)])
def test_multiscale_pwc_equals_direct(d, K):
    g = GridSpec(d, K, 0.01 / K**2)
    rng = np.random.default_rng(K)
    c = rng.normal(size=(K,) * (2 * d))
    X = rng.random((2000, d))
    np.testing.assert_array_equal(P.pwc_direct(g, c, X), P.pwc_multiscale(g, c, X))


def test_shifted_grid_geometry():
    g = GridSpec(2, 3, 0.01, (2, 1))
    assert g.ncoarse == (4, 3)
    np.testing.assert_allclose(g.offset, [1 / 18, 0.0])
    assert len(g.coarse_indices()) == 12 and len(g.refined_indices()) == 9


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(1, 2, 1 / 12)
    with pytest.raises(ValueError):
        GridSpec(4, 2, 0.01)
    with pytest.raises(ValueError):
        GridSpec(1, 2, 0.01, (3,))


def test_coarse_band_mask_kinds():
    x = np.array([0.0, 0.25, 0.5, 0.26])
    assert P.coarse_band_mask_1d(x, 2, 0.02, 1).tolist() == [True, False, True, False]
    assert P.coarse_band_mask_1d(x, 2, 0.02, 2).tolist() == [False, True, False, True]


def test_refined_cells_tile_each_coarse_cell():
    K = 3
    g = GridSpec(2, K, 0.001)
    pts = [((a + 0.5) / K**2, (b + 0.5) / K**2) for a, b in itertools.product(range(K * K), repeat=2)]
    seen = {P.refined_index(g, p) for p in pts}
    assert len(seen) == K ** 4
