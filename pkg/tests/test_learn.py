import math
from dataclasses import replace

import numpy as np
import pytest

from smoothnet import activations as A
from smoothnet import learn as L
from smoothnet import netcore as nc
from smoothnet import _trainkernel as K
from smoothnet.errors import AllCellsDiverged, ConfigError, DivergedLoss, PreconditionFailed

ALL = A.SMOOTH + (A.RELU,)


def _const_target(c=1.0, d=1):
    return L.RFFTarget(d, 1, np.array([c]), np.zeros((1, d)), np.zeros(1), 0)


def _const_net(value, d=1):
    return nc.Network(A.GELU, ((np.zeros((1, d)), [value]),))


# ------------------------------------------------------------------ targets

def test_zero_frequency_target_is_constant():
    t = _const_target()
    np.testing.assert_array_equal(t(np.random.default_rng(0).random((50, 1))), 1.0)


def test_target_determinism_and_shapes():
    a, b = L.gen_rff_target(5, 50, 11), L.gen_rff_target(5, 50, 11)
    assert a.frequencies.shape == (50, 5) and a.amplitudes.shape == (50,)
    for f in ("amplitudes", "frequencies", "phases"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.phases, L.gen_rff_target(5, 50, 12).phases)
    assert np.all((a.phases >= 0) & (a.phases < 2 * math.pi))


def test_normalized_target_has_unit_probe_sup():
    t = L.gen_rff_target(2, 10, 3, normalize=True)
    probe = L._rng(3, L._TAG_PROBE).random((10**4, 2))
    assert np.max(np.abs(t(probe))) == pytest.approx(1.0, rel=1e-14)


@pytest.mark.parametrize("alpha", [(1, 0), (0, 1), (2, 1), (0, 3)])
def test_target_partials_by_finite_differences(alpha):
    t = L.gen_rff_target(2, 6, 4)
    X = np.random.default_rng(1).random((20, 2))
    h = 1e-3

    def D(order, fn):
        # repeated central differences along each axis
        for l, k in enumerate(order):
            for _ in range(k):
                e = np.zeros(2)
                e[l] = h
                fn = (lambda g, e: (lambda Z: (g(Z + e) - g(Z - e)) / (2 * h)))(fn, e)
        return fn

    np.testing.assert_allclose(D(alpha, t)(X), t.partial(alpha, X), atol=1e-4 * 10 ** sum(alpha))


# ------------------------------------------------------------------ data

def test_noiseless_labels_equal_target():
    t = L.gen_rff_target(2, 10, 0)
    data = L.gen_dataset(t, 1024, 0.0, 5)
    np.testing.assert_array_equal(data.labels, t(data.inputs))
    assert data.n == 1024 and data.d == 2
    assert np.all((data.inputs >= 0) & (data.inputs < 1))


def test_dataset_prefix_stable_and_reproducible():
    t = L.gen_rff_target(2, 10, 0)
    big, small = L.gen_dataset(t, 500, 0.1, 9), L.gen_dataset(t, 200, 0.1, 9)
    np.testing.assert_array_equal(big.inputs[:200], small.inputs)
    np.testing.assert_array_equal(big.labels[:200], small.labels)
    np.testing.assert_array_equal(L.gen_dataset(t, 200, 0.1, 9).labels, small.labels)


def test_label_variance():
    sigma, n = 0.1, 10**5
    t = L.gen_rff_target(2, 10, 1)
    y = L.gen_dataset(t, n, sigma, 2).labels
    # independent variance oracle for f(x) on a separate 1e6-point draw
    fx = t(np.random.default_rng(99).random((10**6, 2)))
    want = fx.var() + sigma**2
    c = y - y.mean()
    se = math.sqrt((np.mean(c**4) - np.mean(c**2) ** 2) / n)
    assert abs(y.var() - want) <= 3 * se + 3 * fx.var() * 2 / math.sqrt(10**6)


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("act", ALL, ids=lambda a: a.name)
def test_gradient_matches_finite_differences(act):
    rng = np.random.default_rng(7)
    d, M, n = 3, 4, 40
    X = rng.random((n, d))
    y = rng.normal(size=n)
    lam = 1e-3
    h = 1e-6
    for probe in range(20):
        theta = rng.normal(size=M * (d + 2) + 1)
        if act is A.RELU:
            W1, b1, _, _ = L.unpack(theta, M, d)
            if np.min(np.abs(X @ W1.T + b1)) < 1e-3:  # stay away from kinks
                continue
        _, _, g = L.kernel_loss_and_grad(act, theta, X, y, lam)
        j = int(rng.integers(theta.size))
        e = np.zeros_like(theta)
        e[j] = h
        fd = (L.loss_and_grad(act, theta + e, X, y, lam)[0] - L.loss_and_grad(act, theta - e, X, y, lam)[0]) / (2 * h)
        assert abs(g[j] - fd) <= 1e-5 * max(abs(fd), 1e-2), (probe, j, g[j], fd)


@pytest.mark.parametrize("act", ALL, ids=lambda a: a.name)
def test_kernel_matches_reference(act):
    rng = np.random.default_rng(8)
    d, M, n = 2, 16, 100
    X, y = rng.random((n, d)), rng.normal(size=n)
    theta = L.init_params(M, d, 3) * 3
    l1, m1, g1 = L.loss_and_grad(act, theta, X, y, 1e-2)
    l2, m2, g2 = L.kernel_loss_and_grad(act, theta, X, y, 1e-2)
    assert l1 == pytest.approx(l2, rel=1e-13) and m1 == pytest.approx(m2, rel=1e-13)
    np.testing.assert_allclose(g1, g2, rtol=1e-11, atol=1e-14)
    net = L._to_network(act, theta, d)
    np.testing.assert_allclose(K.forward(L._ACT_CODE[act.kind], X, theta, M), net(X)[:, 0], rtol=1e-13, atol=1e-14)


def test_expneg_accuracy():
    u = np.linspace(0, 40, 100001)
    a = np.empty_like(u)
    da = np.empty_like(u)
    K.act_pair(K.SIGMOID, -u, a, da)
    want = 1 / (1 + np.exp(u))
    np.testing.assert_allclose(a, want, rtol=5e-14)
    K.act_pair(K.SIGMOID, u, a, da)
    np.testing.assert_allclose(a, 1 - want, rtol=5e-14)
    # past the clamp exp(-u) is flushed to zero
    far = np.array([-41.0, -80.0])
    a2, da2 = np.empty(2), np.empty(2)
    K.act_pair(K.SIGMOID, far, a2, da2)
    assert np.all(a2 <= 1 / (1 + np.exp(40.0)))


def test_adam_zero_gradient_is_fixed_point():
    theta = L.init_params(8, 2, 0)
    before = theta.copy()
    z = np.zeros_like(theta)
    K.adam_step(theta, z, z.copy(), z.copy(), 1e-2, 0.9, 0.999, 1e-8, 0.1, 0.001)
    np.testing.assert_array_equal(theta, before)
    zero = np.zeros(8 * 4 + 1)
    K.adam_step(zero, z, z.copy(), z.copy(), 1e-2, 0.9, 0.999, 1e-8, 0.1, 0.001)
    np.testing.assert_array_equal(zero, 0.0)


def test_init_scale():
    M, d = 64, 3
    W1, b1, w2, b2 = L.unpack(L.init_params(M, d, 1), M, d)
    assert np.max(np.abs(W1)) <= d**-0.5 and np.max(np.abs(b1)) <= d**-0.5
    assert np.max(np.abs(w2)) <= M**-0.5 and abs(b2) <= M**-0.5


# ------------------------------------------------------------------ training

def _linear_data(n=256, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    return L.Dataset(X, X @ np.array([0.7, -0.4]) + 0.1 + sigma * rng.standard_normal(n), sigma, seed)


def test_training_reaches_noise_floor_on_linear_target():
    data = _linear_data()
    cfg = L.TrainConfig(64, A.GELU, 1e-2, 0.0, 2000)
    net = L.train_two_layer(data, cfg)
    assert net.meta["final_mse"] <= 1.1 * data.noise_sigma**2
    assert net.meta["final_mse"] < net.meta["initial_mse"]
    assert net.depth == 2 and net.width == 64


def test_training_deterministic():
    data = _linear_data(64)
    cfg = L.TrainConfig(16, A.TANH_SHIFTED, 1e-2, 1e-4, 200, init_seed=5)
    a, b = L.train_two_layer(data, cfg), L.train_two_layer(data, cfg)
    np.testing.assert_array_equal(a.meta["loss_trace"], b.meta["loss_trace"])
    assert nc.dumps(a) == nc.dumps(b)


def test_divergence_reported():
    data = _linear_data(64)
    with pytest.raises(DivergedLoss):
        L.train_two_layer(data, L.TrainConfig(8, A.RELU, 1e300, 0.0, 5))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        L.TrainConfig(0, A.RELU, 1e-3, 0.0, 10)
    with pytest.raises(ConfigError):
        L.TrainConfig(4, A.RELU, 1e-3, -1.0, 10)
    with pytest.raises(ConfigError):
        L.TrainConfig(4, A.RELU, 1e-3, 0.0, 10, schedule="step")
    assert L.TrainConfig(4, A.RELU, 1e-3, 0.0, 10).truncation == 2.0


# ------------------------------------------------------------------ evaluation

def test_generalization_error_constant_nets():
    t = _const_target(0.5)
    cfg = L.TrainConfig(1, A.GELU, 1e-3, 0.0, 1)
    assert L.generalization_error(_const_net(0.5), t, cfg) == 0.0
    assert L.generalization_error(_const_net(0.6), t, cfg) == pytest.approx(0.01, rel=1e-12)
    with pytest.raises(PreconditionFailed):
        L.generalization_error(_const_net(0.5), t, cfg, n_test=100)


def test_truncation_applies_and_is_inert_inside_range():
    t = _const_target(0.0)
    cfg = L.TrainConfig(1, A.GELU, 1e-3, 0.0, 1)
    assert L.generalization_error(_const_net(5.0), t, cfg) == pytest.approx(4.0)
    data = _linear_data(64)
    net = L.train_two_layer(data, L.TrainConfig(8, A.GELU, 1e-2, 0.0, 100))
    t2 = L.gen_rff_target(2, 4, 0)
    X = L._test_points(2, 10**4, 0)
    assert np.max(np.abs(net(X))) < 2
    raw = float(np.mean((net(X)[:, 0] - t2(X)) ** 2))
    assert L.generalization_error(net, t2, cfg) == raw


def test_grid_search_single_cell():
    t = L.gen_rff_target(2, 4, 0, normalize=True)
    data = L.gen_dataset(t, 64, 0.1, 1)
    g = L.grid_search(data, A.GELU, L.Grids((1e-2,), (1e-4,)), t, width=8, epochs=50)
    assert (g.best.learning_rate, g.best.l2_coeff) == (1e-2, 1e-4)
    assert len(g.table) == 1 and g.best_error == g.table[0][2]
    cfg = replace(g.best)
    assert L.generalization_error(g.network, t, cfg) == pytest.approx(g.best_error, rel=1e-12)


def test_grid_search_excludes_diverged_cells():
    t = L.gen_rff_target(2, 4, 0, normalize=True)
    data = L.gen_dataset(t, 64, 0.1, 1)
    g = L.grid_search(data, A.RELU, L.Grids((1e300, 1e-2), (1e-4,)), t, width=8, epochs=20)
    assert g.table[0][3] and not g.table[1][3]
    assert g.best.learning_rate == 1e-2
    with pytest.raises(AllCellsDiverged):
        L.grid_search(data, A.RELU, L.Grids((1e300,), (1e-4,)), t, width=8, epochs=20)
    with pytest.raises(PreconditionFailed):
        L.grid_search(data, A.RELU, L.Grids((), ()), t)


def test_grid_sizes():
    assert len(L.PAPER_GRIDS.cells()) == 27
    assert len(L.DESK_GRIDS.cells()) == 8
    p = L.PRESETS["paper"]
    assert (p.d, p.Kfeat, p.width, p.epochs, p.runs) == (5, 50, 6000, 50000, 5)
    assert p.ns == (1024, 1448, 2048, 2896, 4096, 5792)


TINY = L.Preset("tiny", 2, 3, 8, 40, (64, 128, 256), 2, L.Grids((1e-2,), (1e-4, 1e-3)))


def test_experiment_deterministic_and_parallel_equivalent():
    a = L.run_separation_experiment(TINY, seed=3)
    b = L.run_separation_experiment(TINY, seed=3)
    assert a.records == b.records and a.cells == b.cells
    c = L.run_separation_experiment(TINY, seed=3, workers=2)
    assert a.records == c.records
    assert len(a.records) == 3 * 3 * 2 and len(a.cells) == 2 * len(a.records)
    for act in TINY.activations:
        alpha, r2, means = a.summary[act]
        assert math.isfinite(alpha) and len(means) == 3
    assert all(r[5] >= 0 for r in a.records)


def test_training_mse_decreases_in_almost_all_cells():
    res = L.run_separation_experiment(TINY, seed=4)
    assert res.records  # training MSE is checked on the raw trainer below
    data = L.gen_dataset(L.gen_rff_target(2, 3, 4, True), 128, 0.1, 0)
    tr = L._train_cells(data, A.GELU, 8, 200, [1e-2] * 10, [1e-4] * 10, list(range(10)))
    ok = ~tr.diverged
    assert np.mean(tr.final_mse[ok] < tr.initial_mse[ok]) >= 0.95


def test_unknown_preset():
    with pytest.raises(ConfigError):
        L.run_separation_experiment("huge")


def test_theory_schedule():
    s = L.theory_schedule(1000, 2, 2)
    assert s["L"] == 7 and s["F"] == 2.0
    assert s["M"] == pytest.approx(1000 ** (2 / 12))
    with pytest.raises(PreconditionFailed):
        L.theory_schedule(0, 2, 2)
