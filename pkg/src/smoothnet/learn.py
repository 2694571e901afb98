"""Two-layer networks trained on random Fourier feature targets.

Full-batch Adam with cosine learning-rate decay and an l2 penalty on every
parameter, analytic gradients, grid search over (eta, lambda) scored on a
noiseless test set, and the sample-size sweep comparing ReLU with smooth
activations.

Every random draw comes from a stream keyed by the job coordinates
(seed, activation, n, run, cell), so serial and parallel runs agree bit for
bit. The inner loop runs in a fused compiled kernel; ``loss_and_grad`` is
the plain numpy reference it is checked against.
"""

from __future__ import annotations

import math
import time
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from . import _trainkernel as _k
from . import activations as acts
from .activations import Activation, Kind
from .errors import AllCellsDiverged, ConfigError, DivergedLoss, PreconditionFailed
from .netcore import Network

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8
_ACT_CODE = {Kind.SIGMOID: _k.SIGMOID, Kind.TANH_SHIFTED: _k.TANH_SHIFTED, Kind.SILU: _k.SILU,
             Kind.GELU: _k.GELU, Kind.RELU: _k.RELU}

# Stream tags keep the keyed generators of different purposes apart.
_TAG_TARGET, _TAG_X, _TAG_NOISE, _TAG_INIT, _TAG_TEST, _TAG_PROBE = range(1, 7)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ------------------------------------------------------------------ targets

@dataclass(frozen=True)
class RFFTarget:
    d: int
    Kfeat: int
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    seed: int
    scale: float = 1.0

    def __post_init__(self):
        if self.amplitudes.shape != (self.Kfeat,) or self.phases.shape != (self.Kfeat,):
            raise ValueError("amplitudes and phases need one entry per feature")
        if self.frequencies.shape != (self.Kfeat, self.d):
            raise ValueError("frequencies must have shape (Kfeat, d)")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.scale * (np.cos(X @ self.frequencies.T + self.phases) @ self.amplitudes)

    def partial(self, alpha: Sequence[int], X) -> np.ndarray:
        """D^alpha f: the k-th derivative of cos is cos shifted by k pi/2."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = int(sum(alpha))
        wpow = np.prod(self.frequencies ** np.asarray(alpha), axis=1)
        return self.scale * (np.cos(X @ self.frequencies.T + self.phases + k * math.pi / 2) @ (self.amplitudes * wpow))


def gen_rff_target(d: int, Kfeat: int, seed: int, normalize: bool = False) -> RFFTarget:
    """a_k ~ N(0,1), w_k ~ N(0, I_d), b_k ~ U(0, 2 pi).

    With ``normalize`` the target is rescaled to unit sup norm, estimated on
    1e4 seeded uniform probes.
    """
    if d < 1 or Kfeat < 1:
        raise PreconditionFailed("d and Kfeat must be positive")
    rng = _rng(seed, _TAG_TARGET)
    a = rng.standard_normal(Kfeat)
    w = rng.standard_normal((Kfeat, d))
    b = rng.uniform(0.0, 2 * math.pi, Kfeat)
    t = RFFTarget(d, Kfeat, a, w, b, seed)
    if normalize:
        probe = _rng(seed, _TAG_PROBE).random((10**4, d))
        m = float(np.max(np.abs(t(probe))))
        if m > 0:
            t = replace(t, scale=1.0 / m)
    return t


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


def gen_dataset(target: RFFTarget, n: int, sigma: float, seed: int) -> Dataset:
    """x_i uniform on [0,1]^d and y_i = f(x_i) + N(0, sigma^2).

    Inputs and noise come from separate counter-based streams, so the first
    m points of a size-n draw are the size-m draw.
    """
    if n < 1:
        raise PreconditionFailed("n must be at least 1")
    if sigma < 0:
        raise PreconditionFailed("sigma must be nonnegative")
    X = _rng(seed, _TAG_X).random((n, target.d))
    xi = _rng(seed, _TAG_NOISE).standard_normal(n)
    y = target(X) + (sigma * xi if sigma > 0 else 0.0)
    return Dataset(X, y, float(sigma), seed)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    width: int
    activation: Activation
    learning_rate: float
    l2_coeff: float
    epochs: int
    truncation: float = 2.0
    init_seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.width < 1 or self.epochs < 1:
            raise ConfigError("width and epochs must be positive")
        if not (self.learning_rate > 0 and self.truncation > 0):
            raise ConfigError("learning rate and truncation must be positive")
        if self.l2_coeff < 0:
            raise ConfigError("l2 coefficient must be nonnegative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


def act_and_grad(act: Activation, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """phi(Z) and phi'(Z) sharing the expensive special-function calls."""
    k = act.kind
    if k is Kind.SIGMOID or k is Kind.TANH_SHIFTED:
        c = 1.0 if k is Kind.SIGMOID else 2.0
        s = expit(c * Z)
        return s, c * s * (1.0 - s)
    if k is Kind.SILU:
        s = expit(Z)
        v = Z * s
        return v, s + v * (1.0 - s)
    if k is Kind.GELU:
        P = ndtr(Z)
        return Z * P, P + Z * (_INV_SQRT_2PI * np.exp(-0.5 * Z * Z))
    # ReLU subgradient is 0 at the kink.
    return np.maximum(Z, 0.0), (Z > 0).astype(Z.dtype)


def _layout(M: int, d: int) -> tuple[slice, slice, slice, int]:
    return slice(0, d * M), slice(d * M, d * M + M), slice(d * M + M, d * M + 2 * M), d * M + 2 * M + 1


def unpack(theta: np.ndarray, M: int, d: int):
    """(W1 (M, d), b1, w2, b2) from a flat parameter vector."""
    sW, sb, sw, _ = _layout(M, d)
    return theta[sW].reshape(d, M).T, theta[sb], theta[sw], float(theta[-1])


def init_params(M: int, d: int, seed: int) -> np.ndarray:
    """Layer-wise uniform in +-fan_in^(-1/2) from the keyed stream of ``seed``."""
    rng = _rng(seed, _TAG_INIT)
    r1, r2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(M)
    W1 = rng.uniform(-r1, r1, (M, d))
    b1 = rng.uniform(-r1, r1, M)
    w2 = rng.uniform(-r2, r2, M)
    b2 = rng.uniform(-r2, r2)
    return np.concatenate([W1.T.ravel(), b1, w2, [b2]])


def loss_and_grad(act: Activation, theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float):
    """Reference loss MSE + lam * |theta|^2 and its gradient, plain numpy.

    Training uses the fused kernel; this version is the readable oracle it
    is tested against.
    """
    n, d = X.shape
    M = (theta.size - 1) // (d + 2)
    W1, b1, w2, b2 = unpack(theta, M, d)
    A, dA = act_and_grad(act, X @ W1.T + b1)
    r = A @ w2 + b2 - y
    mse = float(np.mean(r * r))
    g = (2.0 / n) * r
    G = (g[:, None] * w2) * dA
    grad = np.concatenate([(X.T @ G).ravel(), G.sum(axis=0), A.T @ g, [g.sum()]]) + 2 * lam * theta
    return mse + lam * float(theta @ theta), mse, grad


def kernel_loss_and_grad(act: Activation, theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float):
    d = X.shape[1]
    M = (theta.size - 1) // (d + 2)
    grad = np.empty_like(theta)
    buf = np.empty((3, M))
    loss, mse = _k.loss_grad(_ACT_CODE[act.kind], np.ascontiguousarray(X), y, theta, lam, grad,
                             buf[0], buf[1], buf[2])
    return loss, mse, grad


@dataclass
class TrainResult:
    thetas: np.ndarray  # (C, P)
    loss_trace: np.ndarray  # (epochs + 1, C): loss before each step, then after the last
    diverged: np.ndarray  # (C,) bool
    initial_mse: np.ndarray
    final_mse: np.ndarray


def _train_cells(data: Dataset, act: Activation, M: int, epochs: int, etas: Sequence[float],
                 lams: Sequence[float], seeds: Sequence[int], schedule: str = "cosine") -> TrainResult:
    """Full-batch Adam, one cell per (eta, lambda, seed); a non-finite loss stops that cell."""
    C = len(seeds)
    code = _ACT_CODE[act.kind]
    X = np.ascontiguousarray(data.inputs, dtype=np.float64)
    y = np.ascontiguousarray(data.labels, dtype=np.float64)
    thetas = np.stack([init_params(M, data.d, s) for s in seeds])
    trace = np.full((epochs + 1, C), np.nan)
    diverged = np.zeros(C, dtype=bool)
    init_mse, final_mse = np.full(C, np.nan), np.full(C, np.nan)
    grad = np.empty(thetas.shape[1])
    buf = np.empty((3, M))
    for c in range(C):
        theta = thetas[c]
        m1, m2 = np.zeros_like(theta), np.zeros_like(theta)
        lam = float(lams[c])
        for t in range(epochs + 1):
            loss, mse = _k.loss_grad(code, X, y, theta, lam, grad, buf[0], buf[1], buf[2])
            if t == 0:
                init_mse[c] = mse
            if not (math.isfinite(loss) and np.isfinite(grad).all()):
                diverged[c] = True
                break
            trace[t, c] = loss
            if t == epochs:
                final_mse[c] = mse
                break
            lr = float(etas[c]) * (0.5 * (1 + math.cos(math.pi * t / epochs)) if schedule == "cosine" else 1.0)
            _k.adam_step(theta, grad, m1, m2, lr, _ADAM_B1, _ADAM_B2, _ADAM_EPS,
                         1 - _ADAM_B1 ** (t + 1), 1 - _ADAM_B2 ** (t + 1))
    return TrainResult(thetas, trace, diverged, init_mse, final_mse)


def _to_network(act: Activation, theta: np.ndarray, d: int, meta: dict | None = None) -> Network:
    M = (theta.size - 1) // (d + 2)
    W1, b1, w2, b2 = unpack(theta, M, d)
    return Network(act, ((W1, b1), (w2.reshape(1, -1), np.array([b2]))), meta or {})


def train_two_layer(data: Dataset, config: TrainConfig) -> Network:
    """Train one depth-2 network; the loss trace is kept in ``net.meta["loss_trace"]``."""
    res = _train_cells(data, config.activation, config.width, config.epochs, [config.learning_rate],
                       [config.l2_coeff], [config.init_seed], config.schedule)
    if res.diverged[0]:
        raise DivergedLoss(f"loss became non-finite with eta={config.learning_rate:g}")
    return _to_network(config.activation, res.thetas[0], data.d,
                       dict(loss_trace=res.loss_trace[:, 0], final_mse=float(res.final_mse[0]),
                            initial_mse=float(res.initial_mse[0])))


def _test_points(d: int, n_test: int, seed: int) -> np.ndarray:
    return _rng(seed, _TAG_TEST).random((n_test, d))


def _truncated_mse(pred: np.ndarray, truth: np.ndarray, F: float) -> float:
    return float(np.mean((np.clip(pred, -F, F) - truth) ** 2))


def generalization_error(net: Network, target: RFFTarget, config: TrainConfig, n_test: int = 10**4,
                         seed: int = 0) -> float:
    """Noiseless test MSE of the predictor truncated at +-F."""
    if n_test < 10**4:
        raise PreconditionFailed("n_test must be at least 1e4")
    X = _test_points(target.d, n_test, seed)
    return _truncated_mse(net(X)[:, 0], target(X), config.truncation)


# -------------------------------------------------------------- grid search

@dataclass(frozen=True)
class Grids:
    etas: tuple[float, ...]
    lams: tuple[float, ...]

    def cells(self) -> list[tuple[float, float]]:
        return [(e, l) for e in self.etas for l in self.lams]


PAPER_GRIDS = Grids((1e-4, 1e-3, 1e-2), (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1))
DESK_GRIDS = Grids((1e-3, 1e-2), (1e-5, 1e-4, 1e-3, 1e-2))


@dataclass
class GridResult:
    best: TrainConfig
    best_error: float
    table: list[tuple[float, float, float, bool]]  # (eta, lambda, gen_error, diverged)
    network: Network


def grid_search(data: Dataset, activation: Activation, grids: Grids, target: RFFTarget,
                width: int = 256, epochs: int = 5000, truncation: float = 2.0, n_test: int = 10**4,
                seed: int = 0, job_key: Sequence[int] = ()) -> GridResult:
    """Train every (eta, lambda) cell and keep the one with the smallest noiseless test error."""
    cells = grids.cells()
    if not cells:
        raise PreconditionFailed("grids must be nonempty")
    seeds = [_cell_seed(seed, job_key, i) for i in range(len(cells))]
    etas = [c[0] for c in cells]
    lams = [c[1] for c in cells]
    res = _train_cells(data, activation, width, epochs, etas, lams, seeds)
    X = _test_points(target.d, n_test, seed)
    truth = target(X)
    code = _ACT_CODE[activation.kind]
    errs = np.array([np.inf if res.diverged[c] else
                     _truncated_mse(_k.forward(code, X, res.thetas[c], width), truth, truncation)
                     for c in range(len(cells))])
    errs[~np.isfinite(errs)] = np.inf
    table = [(e, l, float(g), bool(dv)) for (e, l), g, dv in zip(cells, errs, res.diverged)]
    if not np.isfinite(errs).any():
        raise AllCellsDiverged(f"all {len(cells)} cells diverged for {activation.name}")
    i = int(np.argmin(errs))
    best = TrainConfig(width, activation, cells[i][0], cells[i][1], epochs, truncation, seeds[i])
    net = _to_network(activation, res.thetas[i], data.d, dict(loss_trace=res.loss_trace[:, i]))
    return GridResult(best, float(errs[i]), table, net)


def _cell_seed(seed: int, job_key: Sequence[int], cell: int) -> int:
    ss = np.random.SeedSequence([int(seed), *map(int, job_key), int(cell)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# --------------------------------------------------------------- experiment

@dataclass(frozen=True)
class Preset:
    name: str
    d: int
    Kfeat: int
    width: int
    epochs: int
    ns: tuple[int, ...]
    runs: int
    grids: Grids
    activations: tuple[str, ...] = ("relu", "gelu", "tanh_shifted")
    sigma: float = 0.1
    normalize_target: bool = True
    n_test: int = 10**4
    truncation: float = 2.0


PRESETS = {
    "desk": Preset("desk", 2, 10, 256, 5000, (256, 512, 1024, 2048), 3, DESK_GRIDS),
    "paper": Preset("paper", 5, 50, 6000, 50000, (1024, 1448, 2048, 2896, 4096, 5792), 5, PAPER_GRIDS,
                    normalize_target=False),
}


@dataclass
class ExperimentResult:
    preset: Preset
    seed: int
    records: list[tuple[str, int, int, float, float, float]]  # activation, n, run, eta, lambda, gen_error
    cells: list[tuple[str, int, int, float, float, float, bool]]
    summary: dict = field(default_factory=dict)  # activation -> (alpha, r2, mean errors per n)
    job_seconds: dict = field(default_factory=dict)  # (activation, n, run) -> wall time

    def mean_errors(self, activation: str) -> list[float]:
        return self.summary[activation][2]


def _job(args):
    preset, seed, act_name, n, run = args
    t0 = time.perf_counter()
    act = acts.get(act_name)
    target = gen_rff_target(preset.d, preset.Kfeat, seed, preset.normalize_target)
    data_seed = int(np.random.SeedSequence([seed, n, run]).generate_state(1)[0])
    data = gen_dataset(target, n, preset.sigma, data_seed)
    key = (_ACT_CODE[act.kind], n, run)
    gr = grid_search(data, act, preset.grids, target, preset.width, preset.epochs, preset.truncation,
                     preset.n_test, seed=seed, job_key=key)
    return act_name, n, run, gr, time.perf_counter() - t0


def run_separation_experiment(preset: str | Preset = "desk", seed: int = 0, workers: int = 1,
                              progress=None, jobs_filter=None) -> ExperimentResult:
    """Sample-size sweep per activation, best-of-grid error per run, power-law fit per activation."""
    from .analysis import fit_log_slope
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    jobs = [(preset, seed, a, n, r) for a in preset.activations for n in preset.ns for r in range(preset.runs)]
    if jobs_filter is not None:
        jobs = [j for j in jobs if jobs_filter(*j[2:])]
    if workers > 1:
        with mp.get_context("spawn").Pool(workers) as pool:
            out = pool.map(_job, jobs, chunksize=1)
    else:
        out = []
        for j in jobs:
            out.append(_job(j))
            if progress is not None:
                progress(out[-1][:3])
    out.sort(key=lambda o: (preset.activations.index(o[0]), o[1], o[2]))
    records, cells = [], []
    for a, n, r, gr, _ in out:
        records.append((a, n, r, gr.best.learning_rate, gr.best.l2_coeff, gr.best_error))
        for e, l, g, dv in gr.table:
            cells.append((a, n, r, e, l, g, dv))
    res = ExperimentResult(preset, seed, records, cells, job_seconds={o[:3]: o[4] for o in out})
    for a in preset.activations:
        ns = [n for n in preset.ns if any(rec[0] == a and rec[1] == n for rec in records)]
        if not ns:
            continue
        means = [float(np.mean([rec[5] for rec in records if rec[0] == a and rec[1] == n])) for n in ns]
        if len(ns) >= 2:
            slope, _, r2 = fit_log_slope(list(zip(ns, means)))
            res.summary[a] = (-slope, r2, means)
        else:
            res.summary[a] = (float("nan"), float("nan"), means)
    return res


def theory_schedule(n: int, d: int, s: float) -> dict:
    """Depth, width and norm growth of the estimator analysis, constants set to one."""
    if n < 1 or d < 1 or not s > 0:
        raise PreconditionFailed("need n >= 1, d >= 1 and s > 0")
    k = math.ceil(s)
    expo = max(d / 2, 1.0, (2 * s + d + 4) / (2 * (2 * s + d)), s * k / (2 * s + d), (4 * s + 6) / (2 * s + d))
    return dict(L=7, M=n ** (d / (4 * s + 2 * d)), B=n**expo, F=2.0,
                rate=n ** (-2 * s / (2 * s + d)) * math.log(max(n, 2)))
