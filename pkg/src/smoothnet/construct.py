"""Explicit network constructions for piecewise polynomial approximation.

Every builder returns a Network whose ``meta`` dict records the quantities
that downstream builders rely on: the certified accuracy, a global output
bound on the relevant input region and the internal parameters (step h,
slope beta, sub-accuracies). Builders never train anything; all weights are
closed-form.

Grids may be shifted. Shifted builders work in the translated frame
z = x + offset, where the grid has ncoarse cells per axis; only the final
approximator fuses the translation into its first layer.

Output bounds are the sound ones implied by the structure of each net
(monotone indicator sums telescope, trapezoids are disjoint), not the loose
worst-case constants. The loose ones overflow float64 for moderate K.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import activations as acts
from . import netcore as nc
from .activations import Activation, ReferencePoint, TailClass
from .errors import BudgetInfeasible, DerivativeOracleMissing, PreconditionFailed
from .netcore import Network
from .partition import GridSpec

# Largest admissible weight magnitude; beyond this float64 evaluation is noise.
LINF_GATE = 1e15
MAX_REFINED_CELLS = 10**7
_ULP = 2.220446049250313e-16


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class MultiIndex:
    alpha: tuple[int, ...]

    def __post_init__(self):
        a = tuple(int(v) for v in self.alpha)
        if any(v < 0 for v in a):
            raise ValueError("multi-index entries must be nonnegative")
        object.__setattr__(self, "alpha", a)

    @property
    def d(self) -> int:
        return len(self.alpha)

    @property
    def order(self) -> int:
        return sum(self.alpha)

    def power(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.ones(X.shape[0])
        for l, a in enumerate(self.alpha):
            if a:
                out = out * X[:, l] ** a
        return out

    @staticmethod
    def all_below(d: int, k: int) -> list["MultiIndex"]:
        """All alpha in N^d with |alpha| < k, graded then lexicographic."""
        out = [MultiIndex(a) for a in itertools.product(range(k), repeat=d) if sum(a) < k]
        return sorted(out, key=lambda m: (m.order, tuple(-v for v in m.alpha)))


def _as_multi(alpha) -> MultiIndex:
    return alpha if isinstance(alpha, MultiIndex) else MultiIndex(tuple(np.atleast_1d(alpha)))


@dataclass
class ApproxBudget:
    eps: float
    s: float
    d: int
    K: int
    delta: float
    C_cal: float
    C_coef: float = 0.0
    eps_eff: float = 0.0
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise PreconditionFailed("K must be at least 1")
        if not 0 < self.delta < 1.0 / (3 * self.K**2):
            raise PreconditionFailed("delta must lie in (0, 1/(3K^2))")
        if not 0 < self.eps:
            raise PreconditionFailed("eps must be positive")

    def record(self, **kw) -> None:
        for k, v in kw.items():
            if isinstance(v, (int, float)) and not v > 0:
                raise PreconditionFailed(f"sub-accuracy {k} must be positive, got {v}")
            self.splits[k] = v


def _frame_index(ncoarse, K: int, Z: np.ndarray):
    """(coarse, refined) 1-based indices of frame points Z, clamped to the frame."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    flat = np.floor(Z * K * K).astype(int)
    top = np.array(ncoarse) * K - 1
    flat = np.clip(flat, 0, top)
    return flat // K + 1, flat % K + 1


@dataclass(frozen=True)
class PiecewiseConstantSpec:
    """Coefficients c[i..., j...] with coarse axes (grid.ncoarse) before refined axes (K)."""

    grid: GridSpec
    coeffs: np.ndarray
    c_max: float | None = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        want = tuple(self.grid.ncoarse) + (self.grid.K,) * self.grid.d
        if c.shape != want:
            raise ValueError(f"coefficient tensor must have shape {want}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        cm = float(np.max(np.abs(c))) if c.size else 0.0
        if self.c_max is None:
            object.__setattr__(self, "c_max", cm)
        elif cm > self.c_max:
            raise ValueError(f"max |c| = {cm} exceeds declared c_max {self.c_max}")

    def evaluate(self, Z) -> np.ndarray:
        """Exact piecewise constant in the grid frame."""
        i, j = _frame_index(self.grid.ncoarse, self.grid.K, Z)
        return self.coeffs[tuple((i - 1).T) + tuple((j - 1).T)]


@dataclass(frozen=True)
class PiecewisePolynomialSpec:
    """Per-cell polynomials sum_alpha a[alpha][i, j] z^alpha in the grid frame."""

    grid: GridSpec
    coeffs: dict
    degree: int
    remainder_constant: float = 0.0
    C_coef: float = 0.0

    def pieces(self) -> dict:
        return {a: PiecewiseConstantSpec(self.grid, c) for a, c in self.coeffs.items()}

    def evaluate(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        i, j = _frame_index(self.grid.ncoarse, self.grid.K, Z)
        idx = tuple((i - 1).T) + tuple((j - 1).T)
        out = np.zeros(Z.shape[0])
        for a, c in self.coeffs.items():
            out += c[idx] * a.power(Z)
        return out


@dataclass(frozen=True)
class TargetFunction:
    """Value oracle plus partial derivatives, on points of shape (n, d)."""

    d: int
    value: Callable[[np.ndarray], np.ndarray]
    partial: Callable[[MultiIndex, np.ndarray], np.ndarray] | None
    sobolev_bound: float
    max_order: int
    sup_bound: float | None = None
    name: str = "target"

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.value(X), dtype=float).reshape(-1)

    def derivative(self, alpha, X) -> np.ndarray:
        alpha = _as_multi(alpha)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if alpha.order == 0:
            return self(X)
        if self.partial is None or alpha.order > self.max_order:
            raise DerivativeOracleMissing(f"{self.name}: no derivative oracle for {alpha.alpha}")
        return np.asarray(self.partial(alpha, X), dtype=float).reshape(-1)

    @property
    def linf(self) -> float:
        return self.sobolev_bound if self.sup_bound is None else self.sup_bound

    def audit(self, order: int, n: int = 2001) -> float:
        """Max |D^alpha f| over a probe grid for |alpha| <= order."""
        g = np.linspace(0.0, 1.0, n if self.d == 1 else int(round(n ** (1.0 / self.d))) + 1)
        X = np.array(list(itertools.product(g, repeat=self.d)))
        worst = 0.0
        for k in range(order + 1):
            for a in itertools.product(range(k + 1), repeat=self.d):
                if sum(a) == k:
                    worst = max(worst, float(np.max(np.abs(self.derivative(MultiIndex(a), X)))))
        return worst


def normalized_sine(s: float = 2, d: int = 1) -> TargetFunction:
    """prod_l sin(2 pi x_l) / (2 pi)^ceil(s): every derivative up to order ceil(s) is at most 1."""
    k = math.ceil(s)
    scale = (2 * math.pi) ** (-k)

    def value(X):
        return scale * np.prod(np.sin(2 * np.pi * X), axis=1)

    def partial(alpha, X):
        out = np.full(X.shape[0], scale)
        for l, a in enumerate(alpha.alpha):
            out = out * (2 * np.pi) ** a * np.sin(2 * np.pi * X[:, l] + a * np.pi / 2)
        return out

    return TargetFunction(d, value, partial, 1.0, 10, sup_bound=scale, name=f"sine_s{s:g}")


def constant_target(c: float, d: int = 1) -> TargetFunction:
    return TargetFunction(d, lambda X: np.full(X.shape[0], float(c)),
                          lambda a, X: np.zeros(X.shape[0]), abs(float(c)), 10,
                          sup_bound=abs(float(c)), name="constant")


def half_square() -> TargetFunction:
    """x^2 / 2 on [0,1]."""

    def partial(alpha, X):
        k = alpha.order
        x = X[:, 0]
        return x if k == 1 else (np.ones_like(x) if k == 2 else np.zeros_like(x))

    return TargetFunction(1, lambda X: 0.5 * X[:, 0] ** 2, partial, 1.0, 10, sup_bound=0.5,
                          name="half_square")


# ------------------------------------------------------------ small helpers

@lru_cache(maxsize=4096)
def _sup_derivative(act: Activation, m: int, center: float, radius: float) -> float:
    return acts.sup_abs_derivative(act, m, center, min(radius, 60.0))


def _check_linf(value: float, stage: str) -> None:
    if not np.isfinite(value) or value > LINF_GATE:
        raise BudgetInfeasible(f"weight magnitude {value:.3g} exceeds {LINF_GATE:.0e}", stage)


def precheck_grid(d: int, K: int, delta_max: float, stage: str) -> None:
    """Reject a grid before anything is allocated for it.

    Every indicator needs slopes of at least 1/delta, and the refined grid
    has K^(2d) cells, each carrying its own coefficients.
    """
    _check_linf(1.0 / delta_max, stage)
    cells = float(K) ** (2 * d)
    if cells > MAX_REFINED_CELLS:
        raise BudgetInfeasible(f"K={K} needs {cells:.3g} refined cells (limit {MAX_REFINED_CELLS:.0e})", stage)


def _depth2(act: Activation, W1, b1, W2, b2, meta: dict) -> Network:
    return Network(act, ((W1, b1), (W2, b2)), meta)


def _const_out(net: Network, key: str = "bound") -> float:
    return float(net.meta[key])


# --------------------------------------------------------------- monomials

def b_m_sum(q, k: int) -> float:
    """(1/2^m) sum over nu in {-1,1}^m of prod(nu) * (nu . q)^k."""
    q = np.asarray(q, dtype=float).reshape(-1)
    m = q.size
    if m < 1 or k < 0:
        raise PreconditionFailed("need m >= 1 and k >= 0")
    nus = np.array(list(itertools.product((-1.0, 1.0), repeat=m)))
    return float(np.sum(np.prod(nus, axis=1) * (nus @ q) ** k) / 2**m)


def _monomial_step(act: Activation, t0: float, m: int, R: float, eps: float):
    """Step h and the certified error for the central-difference unit of order m.

    The (m+1)-th Taylor term cancels by parity, so the remainder can be taken
    at order m+2; the order m+1 bound is kept when it is the better of the two.
    """
    dm = abs(float(act.derivative(m, t0)))
    if dm < 1e-10:
        raise PreconditionFailed(f"|phi^({m})(t0)| = {dm:.3g} < 1e-10")
    radius = 0.5 * R
    s1 = _sup_derivative(act, m + 1, t0, radius) if m + 1 <= acts.MAX_ORDER else math.inf
    s2 = _sup_derivative(act, m + 2, t0, radius) if m + 2 <= acts.MAX_ORDER else math.inf
    f1, f2 = math.factorial(m + 1), math.factorial(m + 2)
    best = None
    # Aim the truncation at 0.9 eps; near the roundoff floor a smaller
    # target (larger h) can still fit, so back off before giving up.
    for frac in (0.9, 0.75, 0.6, 0.45, 0.3):
        target = frac * eps
        h1 = target * f1 * dm / (R ** (m + 1) * s1) if s1 > 0 else math.inf
        h2 = math.sqrt(target * f2 * dm / (R ** (m + 2) * s2)) if s2 > 0 else math.inf
        h = min(max(h1, h2), 0.5)
        trunc = min(h * R ** (m + 1) * s1 / (f1 * dm), h * h * R ** (m + 2) * s2 / (f2 * dm))
        t = np.linspace(t0 - h * R, t0 + h * R, 65)
        phimax = max(1.0, float(np.max(np.abs(act.eval(t)))))
        roundoff = 4 * _ULP * phimax * (1.0 + abs(t0) + h * R) / (h**m * dm)
        if best is None or trunc + roundoff < sum(best[2:]):
            best = (h, dm, trunc, roundoff)
        if trunc + roundoff <= eps:
            break
    h, dm, trunc, roundoff = best
    return h, dm, trunc, roundoff


def build_monomial(act: Activation, ref: ReferencePoint, alpha, Q: float, eps: float) -> Network:
    """Depth-2 net with 2^m hidden units approximating x^alpha on [-Q, Q]^d."""
    alpha = _as_multi(alpha)
    d, m = alpha.d, alpha.order
    if not (Q > 0 and eps > 0):
        raise PreconditionFailed("Q and eps must be positive")
    if m == 0:
        meta = dict(kind="monomial", alpha=alpha.alpha, Q=Q, eps=eps, err=0.0, bound=1.0, h=0.0)
        return _depth2(act, np.zeros((1, d)), np.zeros(1), np.zeros((1, 1)), np.ones(1), meta)
    t0 = ref.t0
    R = m * Q
    h, dm, trunc, roundoff = _monomial_step(act, t0, m, R, eps)
    if trunc + roundoff > eps:
        raise BudgetInfeasible(
            f"order {m} on radius {Q:.3g}: error {trunc + roundoff:.3g} > eps {eps:.3g} "
            f"(roundoff {roundoff:.3g})", "monomial")
    axes = [l for l, a in enumerate(alpha.alpha) for _ in range(a)]
    nus = np.array(list(itertools.product((-1.0, 1.0), repeat=m)))
    W1 = np.zeros((nus.shape[0], d))
    for k, l in enumerate(axes):
        W1[:, l] += h * nus[:, k]
    b1 = np.full(nus.shape[0], t0)
    sign = float(np.sign(act.derivative(m, t0)))
    W2 = (np.prod(nus, axis=1) * sign / (2**m * h**m * dm)).reshape(1, -1)
    linf = max(float(np.max(np.abs(W1))), abs(t0), float(np.max(np.abs(W2))))
    _check_linf(linf, "monomial")
    meta = dict(kind="monomial", alpha=alpha.alpha, Q=Q, eps=eps, err=trunc + roundoff,
                h=h, t0=t0, bound=Q**m + eps, linf=linf)
    return _depth2(act, W1, b1, W2, np.zeros(1), meta)


def build_identity(act: Activation, ref: ReferencePoint, Q: float, eps: float, L: int = 2) -> Network:
    """Depth-L net approximating x -> x on [-Q, Q] to accuracy eps."""
    if L < 2:
        raise PreconditionFailed("identity depth must be at least 2")
    e = eps / (L - 1)
    blocks = [build_monomial(act, ref, (1,), Q + k * e, e) for k in range(L - 1)]
    net = nc.chain_all(*blocks)
    return net.with_meta(kind="identity", Q=Q, eps=eps, L=L, bound=Q + eps,
                         h=[b.meta["h"] for b in blocks])


def build_identity_stack(act: Activation, ref: ReferencePoint, n: int, Q: float, eps: float,
                         L: int = 2) -> Network:
    """n independent identities, x in R^n -> approx x."""
    one = build_identity(act, ref, Q, eps, L)
    net = nc.stack([one] * n)
    return net.with_meta(**one.meta)


# ----------------------------------------------------------- 1-D indicators

def _tail(act: Activation) -> float:
    return float(act.tail_constant)


def _indicator_units(act: Activation, a: float, b: float, delta: float, eps: float):
    """Hidden slopes, biases and output weights of one 1-D indicator, plus beta."""
    C = _tail(act)
    if act.tail_class is TailClass.HEAVISIDE_LIKE:
        beta = 4.0 * C / (delta * eps)
        slopes = np.array([beta, beta])
        biases = np.array([-beta * (a + delta / 2), -beta * (b - delta / 2)])
        out = np.array([1.0, -1.0])
    else:
        beta = 4.0 * C / (eps * delta) if C > 0 else 1.0
        slopes = np.full(4, beta)
        biases = -beta * np.array([a, a + delta, b - delta, b])
        out = np.array([1.0, -1.0, -1.0, 1.0]) / (beta * delta)
    return slopes, biases, out, beta


def _indicator_bounds(act: Activation, eps: float, n: int) -> tuple[float, float]:
    """(per-output bound, bound on the sum of |outputs| over n adjacent cells)."""
    if act.tail_class is TailClass.HEAVISIDE_LIKE:
        if act.monotone:
            # Values in (0,1) and nonnegative telescoping terms.
            return 1.0, 1.0
        S = 2.0 * (1.0 + _tail(act))
        return S, n * S
    # Trapezoids have disjoint ramps, so their exact sum is at most one.
    return 1.0 + eps, 1.0 + n * eps


def build_indicator_1d(act: Activation, a: float, b: float, delta: float, eps: float) -> Network:
    """Depth-2 approximation of 1_[a,b) accurate off [a, a+delta] and [b-delta, b]."""
    if not a < b:
        raise PreconditionFailed("need a < b")
    if not 0 < delta < (b - a) / 3:
        raise PreconditionFailed("delta must lie in (0, (b-a)/3)")
    if not eps > 0:
        raise PreconditionFailed("eps must be positive")
    slopes, biases, out, beta = _indicator_units(act, a, b, delta, eps)
    linf = max(float(np.max(np.abs(slopes))), float(np.max(np.abs(biases))), float(np.max(np.abs(out))))
    _check_linf(linf, "indicator_1d")
    S, _ = _indicator_bounds(act, eps, 1)
    theory = 2 * (1 + _tail(act)) if act.tail_class is TailClass.HEAVISIDE_LIKE else 2.0
    meta = dict(kind="indicator_1d", a=a, b=b, delta=delta, eps=eps, beta=beta, bound=S,
                theory_bound=theory, linf=linf)
    return _depth2(act, slopes.reshape(-1, 1), biases, out.reshape(1, -1), np.zeros(1), meta)


def _indicator_bank(act: Activation, d: int, cells: list[list[tuple[float, float]]],
                    delta: float, eps: float) -> Network:
    """Depth-2 net: x in R^d -> every 1-D indicator of cells[l] applied to x_l, axis-major."""
    rows_W, rows_b, blocks = [], [], []
    beta = 0.0
    for l, cl in enumerate(cells):
        for a, b in cl:
            s, bi, o, beta = _indicator_units(act, a, b, delta, eps)
            w = np.zeros((s.size, d))
            w[:, l] = s
            rows_W.append(w)
            rows_b.append(bi)
            blocks.append(o.reshape(1, -1))
    W1 = np.vstack(rows_W)
    b1 = np.concatenate(rows_b)
    W2 = nc._block_diag(blocks)
    linf = max(float(np.max(np.abs(W1))), float(np.max(np.abs(b1))), float(np.max(np.abs(W2))))
    _check_linf(linf, "indicator_bank")
    return _depth2(act, W1, b1, W2, np.zeros(W2.shape[0]), dict(beta=beta, linf=linf))


def _product_bank(act: Activation, ref: ReferencePoint, ns: tuple[int, ...], S: float,
                  eps: float) -> Network:
    """Depth-2 net reading d groups of sizes ns and emitting all prod_l q_{l, i_l}."""
    d = len(ns)
    P = build_monomial(act, ref, (1,) * d, S, eps)
    (Wp, bp), (Vp, cp) = P.layers
    starts = np.concatenate([[0], np.cumsum(ns)[:-1]])
    n_in = int(sum(ns))
    rows, biases, outs = [], [], []
    for idx in itertools.product(*(range(n) for n in ns)):
        E = np.zeros((d, n_in))
        for l, i in enumerate(idx):
            E[l, starts[l] + i] = 1.0
        rows.append(Wp @ E)
        biases.append(bp)
        outs.append(Vp)
    W2 = nc._block_diag(outs)
    net = _depth2(act, np.vstack(rows), np.concatenate(biases), W2, np.full(W2.shape[0], cp[0]),
                  dict(P.meta))
    return net


def _solve_product_split(act: Activation, d: int, eps: float) -> float:
    """Largest eps1 = eps/2^k with max((1+e)^d - 1, e * S(e)^(d-1)) <= eps/2."""
    e = eps / 2
    for _ in range(200):
        S, _ = _indicator_bounds(act, e, 1)
        if max((1 + e) ** d - 1, e * S ** (d - 1)) <= eps / 2:
            return e
        e /= 2
    raise BudgetInfeasible("no indicator split found", "cell_indicators")


def _cell_indicators(act: Activation, ref: ReferencePoint, ns: tuple[int, ...], width: float,
                     delta: float, eps: float, stage: str) -> Network:
    """Depth-3 net for products of 1-D indicators of [(i-1)w, iw), i <= ns[l]."""
    d = len(ns)
    eps1 = _solve_product_split(act, d, eps)
    eps2 = eps / 2
    S, _ = _indicator_bounds(act, eps1, 1)
    cells = [[((i - 1) * width, i * width) for i in range(1, n + 1)] for n in ns]
    try:
        bank = _indicator_bank(act, d, cells, delta, eps1)
        prod = _product_bank(act, ref, ns, S, eps2)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), stage) from exc
    net = nc.chain(bank, prod)
    N = int(np.prod(ns))
    l1 = float(np.prod([_indicator_bounds(act, eps1, n)[1] for n in ns])) + N * eps2
    return net.with_meta(kind=stage, eps=eps, eps1=eps1, eps2=eps2, beta=bank.meta["beta"],
                         bound=S**d + eps2, l1=l1, delta=delta, h=prod.meta["h"])


# ------------------------------------------------------- grid constructions

def build_coarse_indicators(act: Activation, ref: ReferencePoint, grid: GridSpec, eps: float) -> Network:
    """Depth-3 net whose outputs approximate the coarse-cell indicators off coarse bands."""
    net = _cell_indicators(act, ref, grid.ncoarse, 1.0 / grid.K, grid.delta, eps, "coarse_indicators")
    theory = (2 ** (grid.d + 1) * (1 + _tail(act)) ** grid.d
             if act.tail_class is TailClass.HEAVISIDE_LIKE else 2.0 ** (grid.d + 1))
    return net.with_meta(theory_bound=theory)


def build_coarse_pwc(act: Activation, ref: ReferencePoint, spec: PiecewiseConstantSpec,
                     eps: float) -> Network:
    """Depth-3 net with K^d outputs C_j(z) = sum_i c[i, j] 1_{cell i}(z)."""
    grid = spec.grid
    Nc = int(np.prod(grid.ncoarse))
    cm = spec.c_max
    eps_ind = min(0.5, eps / (cm * Nc)) if cm > 0 else 0.5
    ind = build_coarse_indicators(act, ref, grid, eps_ind)
    C = spec.coeffs.reshape(Nc, grid.K**grid.d).T
    net = nc.chain(ind, nc.affine_net(C, np.zeros(C.shape[0]), act))
    _check_linf(nc.norms(net).linf, "coarse_pwc")
    return net.with_meta(kind="coarse_pwc", eps=eps, eps_ind=eps_ind, c_max=cm,
                         bound=cm * ind.meta["l1"], beta=ind.meta["beta"])


def build_relative_position(act: Activation, ref: ReferencePoint, grid: GridSpec, eps: float,
                            id_share: float = 0.5) -> Network:
    """Depth-2 net approximating z - a(z), the offset of z from its coarse-cell corner.

    ``id_share`` of eps goes to passing z through, the rest to the indicators.
    The pass-through hits the float64 roundoff floor first, so callers that
    need tiny eps give it most of the budget.
    """
    if not 0 < id_share < 1:
        raise PreconditionFailed("id_share must lie in (0, 1)")
    d, K = grid.d, grid.K
    Q = float(np.max(grid.extent))
    eps_id = eps * id_share
    ident = build_identity_stack(act, ref, d, Q, eps_id, 2)
    parts = [ident]
    combine = [np.eye(d)]
    eps_ind = 0.5
    sum_w = 0.0
    if max(grid.ncoarse) > 1:
        nmax = max(grid.ncoarse)
        eps_ind = min(0.5, (eps - eps_id) * K / (nmax * (nmax - 1)))
        cells = [[((i - 1) / K, i / K) for i in range(1, n + 1)] for n in grid.ncoarse]
        bank = _indicator_bank(act, d, cells, grid.delta, eps_ind)
        parts.append(bank)
        M = np.zeros((d, bank.d_out))
        col = 0
        for l, n in enumerate(grid.ncoarse):
            M[l, col:col + n] = -np.arange(n) / K
            col += n
        combine.append(M)
        sum_w = max((n - 1) / K * _indicator_bounds(act, eps_ind, n)[1] for n in grid.ncoarse)
    net = nc.chain(nc.parallel(parts), nc.affine_net(np.hstack(combine), np.zeros(d), act))
    _check_linf(nc.norms(net).linf, "relative_position")
    return net.with_meta(kind="relative_position", eps=eps, eps_id=eps_id, eps_ind=eps_ind,
                         bound=Q + eps_id + sum_w, h=ident.meta["h"])


def build_refined_indicators(act: Activation, ref: ReferencePoint, grid: GridSpec, eps: float) -> Network:
    """Depth-4 net; output j approximates the indicator of refined cell j of z's coarse cell.

    Each output is accurate to eps / K^d on refined interiors.
    """
    d, K = grid.d, grid.K
    pi = build_relative_position(act, ref, grid, grid.delta / 2)
    per = min(0.5, eps / K**d)
    cells = _cell_indicators(act, ref, (K,) * d, 1.0 / K**2, grid.delta / 2, per, "refined_indicators")
    net = nc.chain(pi, cells)
    _check_linf(nc.norms(net).linf, "refined_indicators")
    theory = (2 ** (d + 2) * (1 + _tail(act)) ** d
             if act.tail_class is TailClass.HEAVISIDE_LIKE else 2.0 ** (d + 2))
    return net.with_meta(kind="refined_indicators", eps=eps, eps_each=per, eps_pi=grid.delta / 2,
                         bound=cells.meta["bound"], l1=cells.meta["l1"], beta=cells.meta["beta"],
                         theory_l1=theory)


def _pair_products(act: Activation, ref: ReferencePoint, n: int, Q: float, eps: float) -> Network:
    """Depth-2 net: (u_1..u_n, v_1..v_n) -> sum_j u_j v_j, each product accurate to eps."""
    P = build_monomial(act, ref, (1, 1), Q, eps)
    (Wp, bp), (Vp, cp) = P.layers
    rows = []
    for j in range(n):
        E = np.zeros((2, 2 * n))
        E[0, j] = 1.0
        E[1, n + j] = 1.0
        rows.append(Wp @ E)
    W1 = np.vstack(rows)
    b1 = np.tile(bp, n)
    W2 = np.tile(Vp, (1, n))
    return _depth2(act, W1, b1, W2, np.array([n * cp[0]]), dict(P.meta))


def build_refined_pwc(act: Activation, ref: ReferencePoint, spec: PiecewiseConstantSpec,
                      eps: float) -> Network:
    """Depth-5 net approximating sum_{i,j} c[i,j] 1_{cell (i,j)} with width O(K^d)."""
    grid = spec.grid
    d, K = grid.d, grid.K
    n = K**d
    cm = spec.c_max
    eps_I = min(0.5, eps / (3 * cm)) if cm > 0 else 0.5
    ind = build_refined_indicators(act, ref, grid, eps_I)
    S_I = ind.meta["l1"]
    e_C = eps / (3 * S_I)
    coarse = build_coarse_pwc(act, ref, spec, e_C / 2)
    B0 = max(coarse.meta["bound"], 1e-3)
    ident = build_identity_stack(act, ref, n, B0, e_C / 2, 2)
    psi3 = nc.chain(coarse, ident)
    B3 = B0 + e_C / 2
    eps_prod = eps / (3 * n)
    Q = max(B3, ind.meta["bound"])
    try:
        prod = _pair_products(act, ref, n, Q, eps_prod)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), "refined_pwc") from exc
    net = nc.chain(nc.parallel([psi3, ind]), prod)
    _check_linf(nc.norms(net).linf, "refined_pwc")
    return net.with_meta(kind="refined_pwc", eps=eps, eps_I=eps_I, eps_C=e_C, eps_prod=eps_prod,
                         c_max=cm, bound=B3 * S_I + n * eps_prod,
                         theory_bound=cm * 4 ** (d + 3) * (1 + _tail(act)) ** (2 * d),
                         beta=ind.meta["beta"])


def build_piecewise_monomial(act: Activation, ref: ReferencePoint, spec: PiecewiseConstantSpec,
                             alpha, eps: float) -> Network:
    """Depth-6 net approximating C(z) z^alpha on refined interiors."""
    alpha = _as_multi(alpha)
    grid = spec.grid
    if alpha.d != grid.d:
        raise PreconditionFailed("multi-index length must equal d")
    if alpha.order < 1:
        raise PreconditionFailed("use build_refined_pwc for alpha = 0")
    m = alpha.order
    Qz = float(np.max(grid.extent))
    Zm = Qz**m
    C = build_refined_pwc(act, ref, spec, eps / (3 * Zm))
    B_C = C.meta["bound"]
    e_m = min(0.5, eps / (3 * B_C)) if B_C > 0 else 0.5
    mono = build_monomial(act, ref, alpha, Qz, e_m / 2)
    psi2 = nc.chain(mono, build_identity(act, ref, Zm + e_m / 2, e_m / 2, 4))
    eps_prod = eps / 3
    Q = max(B_C, Zm + e_m)
    try:
        prod = _pair_products(act, ref, 1, Q, eps_prod)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), "piecewise_monomial") from exc
    net = nc.chain(nc.parallel([psi2, C]), prod)
    _check_linf(nc.norms(net).linf, "piecewise_monomial")
    return net.with_meta(kind="piecewise_monomial", eps=eps, alpha=alpha.alpha, eps_C=eps / (3 * Zm),
                         eps_mono=e_m, eps_prod=eps_prod, bound=B_C * (Zm + e_m) + eps_prod,
                         c_max=spec.c_max)


# ----------------------------------------------------- local polynomials

def taylor_remainder_constant(d: int, s: float, bound: float) -> float:
    """c with |f - Taylor_{ceil(s)-1}| <= c K^{-2 ceil(s)} on a refined cell (centered expansion)."""
    k = math.ceil(s)
    return (d / 2.0) ** k / math.factorial(k) * bound


def _cell_centers(grid: GridSpec):
    """Frame centers and clipped domain centers of all cells, in coefficient order."""
    K = grid.K
    idx = list(itertools.product(*(range(n) for n in grid.ncoarse), *(range(K) for _ in range(grid.d))))
    idx = np.array(idx)
    ci, cj = idx[:, :grid.d], idx[:, grid.d:]
    zc = ci / K + (cj + 0.5) / K**2
    xc = np.clip(zc - grid.offset, 0.0, 1.0)
    return idx, zc, xc


def _reexpand(taylor: dict, shift_pts: np.ndarray, d: int, k: int) -> dict:
    """Coefficients of sum_beta t_beta (z - c)^beta in the monomial basis z^alpha."""
    alphas = MultiIndex.all_below(d, k)
    out = {a: np.zeros(shift_pts.shape[0]) for a in alphas}
    for beta, tb in taylor.items():
        for a in alphas:
            if all(al <= bl for al, bl in zip(a.alpha, beta.alpha)):
                w = np.ones(shift_pts.shape[0])
                for l in range(d):
                    w = w * math.comb(beta.alpha[l], a.alpha[l]) * (-shift_pts[:, l]) ** (beta.alpha[l] - a.alpha[l])
                out[a] += tb * w
    return out


def local_polynomial_coeffs(f: TargetFunction, s: float, grid: GridSpec, mode: str = "taylor",
                            C_cal: float | None = None) -> PiecewisePolynomialSpec:
    """Degree ceil(s)-1 local polynomials on every refined cell, in the grid frame.

    ``taylor`` expands at the cell center (clipped to the domain for cells of
    shifted grids that stick out). ``averaged`` averages Taylor polynomials
    over the cell against a polynomial bump with tensor Gauss quadrature.
    """
    d, K = grid.d, grid.K
    k = math.ceil(s)
    if f.partial is None and k > 1:
        raise DerivativeOracleMissing(f"{f.name}: local polynomials of degree {k - 1} need derivatives")
    if k - 1 > f.max_order:
        raise DerivativeOracleMissing(f"{f.name}: derivatives only to order {f.max_order}")
    idx, zc, xc = _cell_centers(grid)
    betas = MultiIndex.all_below(d, k)

    def taylor_at(X):
        return {b: f.derivative(b, X) / math.prod(math.factorial(v) for v in b.alpha) for b in betas}

    if mode == "taylor":
        coef = _reexpand(taylor_at(xc), xc + grid.offset, d, k)
    elif mode == "averaged":
        nodes, weights = np.polynomial.legendre.leggauss(2 * k)
        bump = (1 - nodes**2) ** 2
        wts = weights * bump
        wts = wts / wts.sum()
        coef = {a: np.zeros(idx.shape[0]) for a in betas}
        h = 0.5 / K**2
        for combo in itertools.product(range(nodes.size), repeat=d):
            u = np.array([nodes[c] for c in combo])
            w = float(np.prod([wts[c] for c in combo]))
            Y = np.clip(xc + h * u, 0.0, 1.0)
            part = _reexpand(taylor_at(Y), Y + grid.offset, d, k)
            for a in betas:
                coef[a] += w * part[a]
    else:
        raise ValueError("mode must be 'taylor' or 'averaged'")
    shape = tuple(grid.ncoarse) + (K,) * d
    coeffs = {a: coef[a].reshape(shape) for a in betas}
    c1 = taylor_remainder_constant(d, s, f.sobolev_bound)
    C_coef = max(float(np.max(np.abs(c))) for c in coeffs.values())
    return PiecewisePolynomialSpec(grid, coeffs, k - 1, c1 if C_cal is None else C_cal / 2, C_coef)


# ------------------------------------------------------ L2 approximator

def schedule_K(C_cal: float, eps: float, s: float) -> int:
    return max(1, math.ceil((C_cal / eps) ** (1.0 / (2 * s)) - 1e-12))


def _assemble(act: Activation, ref: ReferencePoint, poly: PiecewisePolynomialSpec, eps_net: float):
    terms = []
    pieces = poly.pieces()
    n = len(pieces)
    e = eps_net / n
    for a, spec in pieces.items():
        if a.order == 0:
            base = build_refined_pwc(act, ref, spec, e / 2)
            pad = build_identity(act, ref, base.meta["bound"] + 1e-3, e / 2, 2)
            t = nc.chain(base, pad).with_meta(bound=base.meta["bound"] + 1e-3 + e / 2)
        else:
            t = build_piecewise_monomial(act, ref, spec, a, e)
        terms.append(t)
    net = nc.affine_combine(terms, [1.0] * n, 0.0)
    return net, sum(t.meta["bound"] for t in terms)


def build_shifted_approximator(act: Activation, ref: ReferencePoint, f: TargetFunction, s: float,
                               grid: GridSpec, eps_net: float, mode: str = "taylor",
                               poly: PiecewisePolynomialSpec | None = None) -> Network:
    """Depth-6 net reproducing the local polynomials of ``grid`` to eps_net on refined interiors.

    The input translation of a shifted grid is fused into the first layer, so
    the returned network takes points x of [0,1]^d.
    """
    if poly is None:
        poly = local_polynomial_coeffs(f, s, grid, mode)
    elif poly.grid != grid:
        poly = PiecewisePolynomialSpec(grid, poly.coeffs, poly.degree, poly.remainder_constant, poly.C_coef)
    net, bound = _assemble(act, ref, poly, eps_net)
    if any(v == 2 for v in grid.v):
        net = nc.chain(nc.select(grid.d, np.eye(grid.d), grid.offset, act), net)
    c1 = taylor_remainder_constant(grid.d, s, f.sobolev_bound)
    return net.with_meta(kind="shifted_approximator", bound=bound, K=grid.K, delta=grid.delta,
                         shift=grid.v, eps_net=eps_net, poly=poly,
                         eps_poly=c1 * grid.K ** (-2 * math.ceil(s)))


def build_l2_approximator(act: Activation, ref: ReferencePoint, f: TargetFunction, s: float, eps: float,
                          C_cal: float | None = None, shift=None, mode: str = "taylor",
                          delta: float | None = None) -> tuple[Network, ApproxBudget]:
    """Depth-6 network with L2([0,1]^d) error at most eps.

    K follows the schedule K = ceil((C_cal/eps)^(1/2s)) and every internal
    accuracy is set from eps_eff = C_cal K^(-2s) <= eps, the accuracy the
    grid affords (floored at eps/4). Half of eps_eff goes to the local polynomials, a quarter
    to the network on refined interiors and a quarter to the bands.
    """
    d = f.d
    if not 0 < eps < 1:
        raise PreconditionFailed("eps must lie in (0, 1)")
    c1 = taylor_remainder_constant(d, s, f.sobolev_bound)
    if C_cal is None:
        C_cal = max(2 * c1, 1e-12)
    if C_cal < 2 * c1 * (1 - 1e-12):
        raise PreconditionFailed(f"C_cal={C_cal:.4g} is below the certified 2*c1={2 * c1:.4g}")
    K = schedule_K(C_cal, eps, s)
    # The floor keeps tiny calibrations (constant targets) from starving the net.
    eps_eff = min(eps, max(C_cal * K ** (-2 * s), eps / 4))
    F = f.linf
    d_max = 0.99 / (6 * K * K) if delta is None else delta
    if delta is None and F > 0:
        d_max = min(d_max, (eps_eff / 4) ** 2 / (2 * d * (K * K + 1) * F**2))
    precheck_grid(d, K, d_max, "l2_approximator")
    probe = GridSpec(d, K, 1.0 / (4 * K * K), shift)
    poly = local_polynomial_coeffs(f, s, probe, mode)
    Qz = float(np.max(probe.extent))
    M = 2 * sum(float(np.max(np.abs(c))) * Qz ** a.order for a, c in poly.coeffs.items()) + eps_eff
    eps_net = eps_eff / 4
    nodes = K * K + 1
    for _ in range(4):
        dl = delta if delta is not None else (eps_eff / 4) ** 2 / (2 * d * nodes * (M + F) ** 2)
        grid = GridSpec(d, K, min(dl, 0.99 / (6 * K * K)), shift)
        try:
            net = build_shifted_approximator(act, ref, f, s, grid, eps_net, poly=poly)
        except BudgetInfeasible as exc:
            raise BudgetInfeasible(str(exc), f"l2_approximator/{exc.stage}") from exc
        bound = net.meta["bound"]
        if bound <= M or delta is not None:
            break
        M = 1.25 * bound
    else:
        raise BudgetInfeasible("output bound did not stabilize", "l2_approximator")
    budget = ApproxBudget(eps, s, d, K, grid.delta, C_cal, poly.C_coef, eps_eff)
    budget.record(eps_poly=net.meta["eps_poly"], eps_net=eps_net,
                  eps_band=math.sqrt(2 * d * nodes * grid.delta) * (M + F), bound=bound, c1=c1)
    net = net.with_meta(kind="l2_approximator", eps=eps, eps_eff=eps_eff)
    return net, budget
