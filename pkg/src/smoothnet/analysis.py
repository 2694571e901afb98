"""Error metrics, scaling fits and the ReLU lower-bound machinery.

Sup errors are taken on uniform grids, L2 errors by seeded Monte Carlo. The
lower-bound side works in one dimension: a ReLU network is a continuous
piecewise linear function, its pieces are found by exact breakpoint
propagation, and no such function with K pieces can beat K^-4/720 in squared
L2 error against x^2/2 on [0,1].
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import netcore as nc
from .activations import Kind
from .errors import ActivationNotReLU, DegenerateInput, EmptyRegion, PreconditionFailed
from .netcore import Network

_CHUNK = 1 << 16
_DEDUP = 1e-12


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class ScalingRow:
    control: float
    measured_error: float
    width: int
    depth: int
    linf_norm: float
    runtime_ms: int

    def __post_init__(self):
        if not self.measured_error >= 0:
            raise ValueError("measured_error must be nonnegative")


def rows_to_csv(rows: Sequence, path=None, exclude: Sequence[str] = ()) -> str:
    """Write dataclass rows as CSV with a fixed float format; returns the text.

    Columns named in ``exclude`` (wall-clock timings, say) are left out so
    reruns stay byte-identical.
    """
    if not rows:
        raise EmptyRegion("no rows to write")
    names = [f.name for f in fields(rows[0]) if f.name not in exclude]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        row = asdict(r)
        w.writerow([_fmt(row[k]) for k in names])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _grid_points(d: int, spacing: float) -> np.ndarray:
    n = int(math.ceil(1.0 / spacing - 1e-9))
    g = np.linspace(0.0, 1.0, n + 1)
    if d == 1:
        return g.reshape(-1, 1)
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _scalar(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v.reshape(v.shape[0], -1)[:, 0] if v.ndim > 1 else v.reshape(-1)


def sup_error_on_grid(net_eval: Callable, f: Callable, region_predicate: Callable | None,
                      spacing: float, d: int = 1) -> tuple[float, np.ndarray]:
    """Max |net(x) - f(x)| over grid points of [0,1]^d passing the predicate.

    The grid has spacing at most ``spacing`` and always contains both ends of
    every axis. Returns the maximum and a witness point.
    """
    if not spacing > 0:
        raise PreconditionFailed("spacing must be positive")
    X = _grid_points(d, spacing)
    best, witness, seen = -1.0, None, 0
    for s in range(0, X.shape[0], _CHUNK):
        Z = X[s:s + _CHUNK]
        if region_predicate is not None:
            Z = Z[np.asarray(region_predicate(Z), dtype=bool)]
        if Z.shape[0] == 0:
            continue
        seen += Z.shape[0]
        err = np.abs(_scalar(net_eval(Z)) - _scalar(f(Z)))
        i = int(np.argmax(err))
        if err[i] > best:
            best, witness = float(err[i]), Z[i].copy()
    if seen == 0:
        raise EmptyRegion("no grid point satisfies the region predicate")
    return best, witness


def mc_l2_error(net_eval: Callable, f: Callable, n_samples: int = 10**5, seed: int = 0,
                d: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate of ||net - f||_L2([0,1]^d) and its standard error.

    The standard error of the root is propagated from that of the mean square
    by the delta method; it is zero when every sample agrees.
    """
    if n_samples < 10**4:
        raise PreconditionFailed("need at least 1e4 samples")
    rng = np.random.default_rng(seed)
    X = rng.random((n_samples, d))
    sq = np.empty(n_samples)
    for s in range(0, n_samples, _CHUNK):
        Z = X[s:s + _CHUNK]
        sq[s:s + _CHUNK] = (_scalar(net_eval(Z)) - _scalar(f(Z))) ** 2
    mean = float(sq.mean())
    est = math.sqrt(mean)
    if est == 0.0:
        return 0.0, 0.0
    se_mean = float(sq.std(ddof=1)) / math.sqrt(n_samples)
    return est, se_mean / (2.0 * est)


def fit_log_slope(points: Iterable[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS fit of ln y = slope * ln x + intercept. Returns (slope, intercept, r^2).

    With the power-law convention y ~ x^-alpha the exponent is alpha = -slope.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DegenerateInput("need at least two points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise DegenerateInput("all coordinates must be positive and finite")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise DegenerateInput("all x values are identical")
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    ss_res = float(np.sum((ly - A @ np.array([slope, intercept])) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def run_scaling_study(controls: Sequence[float], build: Callable, measure: Callable) -> list[ScalingRow]:
    """One ScalingRow per control: ``build(c) -> Network``, ``measure(c, net) -> error``.

    runtime_ms covers build plus measurement.
    """
    rows = []
    for c in controls:
        t = time.perf_counter()
        net = build(c)
        err = float(measure(c, net))
        ms = int(round(1000 * (time.perf_counter() - t)))
        rows.append(ScalingRow(float(c), err, net.width, net.depth, nc.norms(net).linf, ms))
    return rows


# ------------------------------------------------------- piecewise linear

@dataclass(frozen=True)
class PiecewiseLinearProfile:
    """Continuous piecewise linear function on [0,1]; breakpoints lie in (0,1)."""

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.size and (np.any(np.diff(b) <= 0) or b[0] <= 0 or b[-1] >= 1):
            raise ValueError("breakpoints must be strictly increasing inside (0,1)")
        if len(self.slopes) != b.size + 1 or len(self.intercepts) != b.size + 1:
            raise ValueError("need one slope and intercept per piece")

    @property
    def n_pieces(self) -> int:
        return len(self.slopes)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[0.0], self.breakpoints, [1.0]])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.searchsorted(np.asarray(self.breakpoints), x, side="right")
        return np.asarray(self.slopes)[k] * x + np.asarray(self.intercepts)[k]

    def merged(self, tol: float = 1e-9) -> "PiecewiseLinearProfile":
        """Drop breakpoints where the slope does not actually change."""
        bp, sl, ic = [], [self.slopes[0]], [self.intercepts[0]]
        for b, s, c in zip(self.breakpoints, self.slopes[1:], self.intercepts[1:]):
            if abs(s - sl[-1]) <= tol * max(1.0, abs(s), abs(sl[-1])):
                continue
            bp.append(b)
            sl.append(s)
            ic.append(c)
        return PiecewiseLinearProfile(tuple(bp), tuple(sl), tuple(ic))


def extract_pwl_profile(net: Network, d_in: int = 1) -> PiecewiseLinearProfile:
    """Exact piece structure of a scalar ReLU net on [0,1].

    Every unit's pre-activation is affine on each current piece; its zero
    crossings strictly inside a piece become new breakpoints, then the ReLU
    is applied piece by piece.
    """
    if net.activation.kind is not Kind.RELU:
        raise ActivationNotReLU(f"piece extraction needs ReLU, got {net.activation.name}")
    if d_in != 1 or net.d_in != 1 or net.d_out != 1:
        raise PreconditionFailed("piece extraction is one-dimensional: d_in = d_out = 1")
    edges = np.array([0.0, 1.0])
    # slope and intercept of every current unit on every piece: (pieces, units)
    S = np.ones((1, 1))
    C = np.zeros((1, 1))
    for li, (W, b) in enumerate(net.layers):
        S, C = S @ W.T, C @ W.T + b
        if li + 1 == net.depth:
            break
        new_edges = [edges[0]]
        new_S, new_C = [], []
        for p in range(edges.size - 1):
            lo, hi = edges[p], edges[p + 1]
            s, c = S[p], C[p]
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(s != 0, -c / s, np.nan)
            cuts = np.unique(z[(z > lo + _DEDUP) & (z < hi - _DEDUP)])
            pts = np.concatenate([[lo], cuts, [hi]])
            for a, bnd in zip(pts[:-1], pts[1:]):
                mid = 0.5 * (a + bnd)
                on = (s * mid + c) > 0
                new_S.append(np.where(on, s, 0.0))
                new_C.append(np.where(on, c, 0.0))
                new_edges.append(bnd)
        edges = _dedup(np.array(new_edges))
        S, C = np.array(new_S), np.array(new_C)
        if S.shape[0] != edges.size - 1:
            raise AssertionError("piece bookkeeping out of sync")
    return PiecewiseLinearProfile(tuple(edges[1:-1]), tuple(S[:, 0]), tuple(C[:, 0]))


def _dedup(edges: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], np.diff(edges) > _DEDUP])
    if not keep.all():
        raise AssertionError("degenerate piece survived the crossing filter")
    return edges


def piece_count_bound(M: int, L: int) -> int:
    """(M+1)^(L-1): most pieces a depth-L, width-M ReLU net can have on a line."""
    return (M + 1) ** (L - 1)


def random_relu_net(rng: np.random.Generator, L: int, M: int, scale: float = 1.0) -> Network:
    """Depth-L scalar ReLU net with L-1 hidden layers of width M and Gaussian weights."""
    from .activations import RELU
    dims = [1] + [M] * (L - 1) + [1]
    layers = tuple((scale * rng.standard_normal((o, i)), scale * rng.standard_normal(o))
                   for i, o in zip(dims[:-1], dims[1:]))
    return Network(RELU, layers)


# ------------------------------------------------------------ lower bounds

def best_linear_sq_error(l: float, a: float = 1.0) -> float:
    """min over affine g of int_I (a x^2 - g)^2 on an interval of length l.

    Shifting the interval adds an affine term to a x^2, so the minimum only
    depends on l: a^2 l^5 / 180, attained at g = a (l^2/12) after centering.
    """
    if not l > 0:
        raise PreconditionFailed("interval length must be positive")
    return a * a * l**5 / 180.0


def pwl_sq_error(profile: PiecewiseLinearProfile, a: float = 0.5) -> float:
    """Exact int_0^1 (a x^2 - p(x))^2 for a piecewise linear p, piece by piece."""
    total = 0.0
    e = profile.edges
    for k in range(profile.n_pieces):
        m, c = profile.slopes[k], profile.intercepts[k]
        # (a x^2 - m x - c)^2 = a^2 x^4 - 2am x^3 + (m^2 - 2ac) x^2 + 2mc x + c^2
        coef = np.array([a * a, -2 * a * m, m * m - 2 * a * c, 2 * m * c, c * c])
        powers = np.array([5, 4, 3, 2, 1])
        lo, hi = e[k], e[k + 1]
        total += float(np.sum(coef * (hi**powers - lo**powers) / powers))
    return max(total, 0.0)


def best_pwl_sq_error_dp(K: int, grid_resolution: int = 4096, a: float = 0.5) -> float:
    """Least squared L2 error of a K-piece (possibly discontinuous) linear fit to a x^2.

    Dynamic program over breakpoints restricted to multiples of
    1/grid_resolution. Continuous fits can only do worse, so this is a lower
    oracle for ReLU nets with K pieces.
    """
    if K < 1:
        raise PreconditionFailed("K must be at least 1")
    if grid_resolution < 256:
        raise PreconditionFailed("grid_resolution must be at least 256")
    n = grid_resolution
    cost = np.array([0.0] + [best_linear_sq_error(j / n, a) for j in range(1, n + 1)])
    inf = math.inf
    dp = np.full(n + 1, inf)
    dp[0] = 0.0
    for _ in range(K):
        nxt = np.full(n + 1, inf)
        nxt[0] = 0.0
        for j in range(1, n + 1):
            # last piece is [i/n, j/n] for some i < j
            nxt[j] = float(np.min(dp[:j] + cost[j:0:-1]))
        # allowing fewer than K pieces keeps the value monotone in K
        dp = np.minimum(dp, nxt)
    return float(dp[n])


def relu_lower_bound_value(M: int, L: int) -> float:
    """L2 lower bound (1/(12 sqrt 5)) (M+1)^(-2(L-1)) for x^2/2 with depth L, width M."""
    if M < 2 or L < 2:
        raise PreconditionFailed("need M >= 2 and L >= 2")
    return (M + 1) ** (-2.0 * (L - 1)) / (12.0 * math.sqrt(5.0))


def prop61_exponent(L: int, s: float) -> float:
    """Exponent of (M log M) in the ReLU approximation rate: -2 min(L-1, s)."""
    return -2.0 * min(L - 1, s)


def prop61_rate(M: int, L: int, s: float) -> float:
    """(M log M)^(-2 min(L-1, s)), the rate with its unknown constant set to one."""
    if M < 2 or L < 2 or not s > 0:
        raise PreconditionFailed("need M >= 2, L >= 2 and s > 0")
    return (M * math.log(M)) ** prop61_exponent(L, s)
