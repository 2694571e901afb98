"""Partition-of-unity weights and the depth-7 uniform approximator.

The univariate weights w_1, w_2 = 1 - w_1 are 1/K^2-periodic bumps built from
one basis function B. w_1 nearly vanishes around the refined nodes k/K^2 and
w_2 around the half-shifted nodes (2k+1)/(2K^2). Multiplying each shifted
depth-6 approximator by the matching weight kills its band errors, which
upgrades L2 accuracy to sup-norm accuracy at the cost of one extra layer.

The network for w_2 is the exact complement 1 - (network for w_1). Building
it from the second quasi-indicator instead fails for even K, where the
half-shifted coarse nodes are refined nodes and w_2 is close to one there.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import construct as cs
from . import netcore as nc
from .activations import Activation, ReferencePoint, TailClass
from .construct import ApproxBudget, TargetFunction
from .errors import BudgetInfeasible, PreconditionFailed
from .netcore import Network
from .partition import GridSpec

SAFETY = 2.0
# Share of a global weight net's accuracy spent on its final product unit.
_PROD_SHARE = 0.1
# Shares of eps in the uniform approximator: shifted approximators on their
# interiors, weight nets, residual weights inside shifted bands, products.
# Weight accuracy enters the relative-position accuracy quadratically, so it
# gets the largest share.
LINF_SPLIT = dict(psi=0.35, weight=0.45, vanish=0.15, prod=0.05)


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class WeightParams:
    beta: float
    beta_tilde: float
    grid: GridSpec
    act: Activation

    def __post_init__(self):
        if not (self.beta > 0 and self.beta_tilde > 0):
            raise PreconditionFailed("beta and beta_tilde must be positive")
        if not self.grid.delta < 1.0 / (12 * self.grid.K**2):
            raise PreconditionFailed("weights need delta < 1/(12K^2)")
        if self.act.tail_class is TailClass.EXACT_RELU:
            raise PreconditionFailed("weights need a smooth activation")

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def delta(self) -> float:
        return self.grid.delta


@dataclass(frozen=True)
class ShiftIndex:
    v: tuple[int, ...]

    def __post_init__(self):
        v = tuple(int(a) for a in self.v)
        if not v or any(a not in (1, 2) for a in v):
            raise ValueError("shift components must be 1 or 2")
        object.__setattr__(self, "v", v)

    @property
    def d(self) -> int:
        return len(self.v)

    @staticmethod
    def all(d: int) -> list["ShiftIndex"]:
        return [ShiftIndex(v) for v in itertools.product((1, 2), repeat=d)]


def _heaviside(act: Activation) -> bool:
    return act.tail_class is TailClass.HEAVISIDE_LIKE


# ---------------------------------------------------------- reference evaluators

def basis_eval(act: Activation, beta: float, delta: float, K: int, t) -> np.ndarray:
    """The basis bump B(t); close to the indicator of [3 delta, 1/K^2 - 3 delta]."""
    t = np.asarray(t, dtype=float)
    h = 1.0 / K**2
    if _heaviside(act):
        return act.eval(beta * (t - 3 * delta)) - act.eval(beta * (t + 3 * delta - h))
    return (act.eval(beta * (t - 2 * delta)) - act.eval(beta * (t - 4 * delta))
            - act.eval(beta * (t - h + 4 * delta)) + act.eval(beta * (t - h + 2 * delta))) / (2 * delta * beta)


def _w1(params: WeightParams, x: np.ndarray) -> np.ndarray:
    K = params.K
    x = np.where(x >= 1.0, 0.0, x)  # periodic patch w(1) = w(0)
    k = np.minimum(np.floor(x * K * K), K * K - 1)
    return basis_eval(params.act, params.beta, params.delta, K, x - k / K**2)


def weight_eval(params: WeightParams, which, x) -> np.ndarray:
    """w_i(x) for i in {1, 2} (x of shape (n,)) or w_v(x) for v in [2]^d (x of shape (n, d))."""
    if isinstance(which, ShiftIndex):
        which = which.v
    if isinstance(which, (tuple, list)):
        v = ShiftIndex(tuple(which)).v
        X = np.asarray(x, dtype=float).reshape(-1, len(v))
        out = np.ones(X.shape[0])
        for l, vl in enumerate(v):
            out = out * weight_eval(params, vl, X[:, l])
        return out
    if which not in (1, 2):
        raise ValueError("weight index must be 1 or 2")
    x = np.asarray(x, dtype=float)
    w = _w1(params, x)
    return w if which == 1 else 1.0 - w


def quasi_indicator_eval(params: WeightParams, i: int, x, form: str = "corrected") -> np.ndarray:
    """Smooth surrogate of the indicator of [0,1] minus the coarse 2*delta band.

    i = 2 is the translate I_2(x) = I_1(x + 1/(2K)). For ReLU-like activations
    the ramps sit on [delta, 2 delta] inside each coarse cell; ``form="ramp24"``
    places them on [2 delta, 4 delta] instead, which is 1/2 at distance
    3 delta and so does not match the indicator there.
    """
    if i not in (1, 2):
        raise ValueError("quasi-indicator index must be 1 or 2")
    K, dl, bt, act = params.K, params.delta, params.beta_tilde, params.act
    if not dl < 1.0 / (8 * K):
        raise PreconditionFailed("quasi-indicators need delta < 1/(8K)")
    x = np.asarray(x, dtype=float) + (0.5 / K if i == 2 else 0.0)
    k = np.arange(K + 1).reshape((-1,) + (1,) * x.ndim)
    lo, hi = k / K, (k + 1) / K
    if _heaviside(act):
        terms = act.eval(bt * (x - lo - 1.5 * dl)) - act.eval(bt * (x - hi + 1.5 * dl))
        return terms.sum(axis=0)
    a, b = (dl, 2 * dl) if form == "corrected" else (2 * dl, 4 * dl)
    terms = (act.eval(bt * (x - lo - a)) - act.eval(bt * (x - lo - b))
             - act.eval(bt * (x - hi + b)) + act.eval(bt * (x - hi + a)))
    return terms.sum(axis=0) / ((b - a) * bt)


# --------------------------------------------------------------- bound algebra

def _w_sup(act: Activation, e_vanish: float) -> float:
    """sup |w_i| on [0,1] once beta meets the quasi-vanishing floor for e_vanish."""
    if _heaviside(act):
        return 1.0 if act.monotone else 2 * act.tail_constant + 3
    return 1.0 + e_vanish


def _unit_sup(act: Activation, e: float) -> float:
    """Bound on the band/quasi-indicator sums when their error is at most e."""
    if _heaviside(act):
        return 1.0 if act.monotone else 2 * act.tail_constant + 2
    return 1.0 + e


def _band_floor(act: Activation, K: int, delta: float, e: float) -> float:
    """Smallest beta giving |eta_1 - w_1| <= e/2 on a coarse cell."""
    C = act.tail_constant
    if _heaviside(act):
        return 4 * C * K / (3 * delta * e)
    return 4 * C * K / (delta * e)


def _vanish_floor(act: Activation, delta: float, e: float) -> float:
    """Smallest beta with |w_1| <= e on the 2 delta band around refined nodes."""
    return 2 * act.tail_constant / (delta * e)


def _eta_lipschitz(act: Activation, K: int, delta: float, beta: float) -> float:
    if _heaviside(act) and act.monotone:
        # phi' is even and unimodal: within each of the two signed groups of
        # centers (spacing 1/K^2) at most one lies closer than beta/(2K^2).
        far = float(act.derivative(1, beta / (2 * K * K)))
        return beta * (act.lipschitz + 2 * K * far)
    if _heaviside(act):
        return 2 * K * beta * act.lipschitz
    return 2 * K * act.lipschitz / delta


def _global_split(act: Activation, eps: float) -> float:
    """Common sub-accuracy for the band net, the quasi-indicator and quasi-vanishing."""
    e = min(eps, 1.0)
    B_nu = _unit_sup(act, e) + e
    B_psi = _unit_sup(act, e)
    B_w = _w_sup(act, e)
    return (1 - _PROD_SHARE) * eps / (2 * B_nu + 1 + max(B_w, B_psi))


def global_floors(act: Activation, K: int, delta: float, eps: float) -> tuple[float, float]:
    """(beta floor, beta_tilde floor) for a univariate global weight net of accuracy eps."""
    e = _global_split(act, eps)
    beta = max(_band_floor(act, K, delta, e), _vanish_floor(act, delta, e))
    beta_t = 8 * (K + 1) * act.tail_constant / (delta * e)
    return beta, beta_t


def _multi_split(act: Activation, d: int, eps: float) -> float:
    e = eps / (2 * d)
    while d * e * (_w_sup(act, e) + e) ** (d - 1) > eps / 2:
        e *= 0.95
    return e


def make_weight_params(act: Activation, K: int, eps: float, d: int = 1, delta: float | None = None,
                       safety: float = SAFETY, beta_min: float = 0.0) -> WeightParams:
    """Parameters meeting the floors of the d-variate weight nets at accuracy eps."""
    delta = 1.0 / (24 * K * K) if delta is None else delta
    e = _multi_split(act, d, eps) if d > 1 else eps
    b, bt = global_floors(act, K, delta, e)
    return WeightParams(safety * max(b, beta_min), safety * bt, GridSpec(1, K, delta), act)


def _require(value: float, floor: float, name: str, stage: str) -> None:
    if value < floor * (1 - 1e-12):
        raise PreconditionFailed(f"{stage}: {name}={value:.4g} is below the floor {floor:.4g}")


# ------------------------------------------------------------------ builders

def _eta_layer(act: Activation, K: int, delta: float, beta: float) -> Network:
    """Depth-2 net r -> (eta_1(r), 1 - eta_1(r)), the basis bumps of one coarse cell."""
    h = 1.0 / K**2
    starts = np.arange(K) * h
    if _heaviside(act):
        centers = np.concatenate([starts + 3 * delta, starts + h - 3 * delta])
        out = np.concatenate([np.ones(K), -np.ones(K)])
    else:
        centers = np.concatenate([starts + 2 * delta, starts + 4 * delta,
                                  starts + h - 4 * delta, starts + h - 2 * delta])
        out = np.concatenate([np.ones(K), -np.ones(K), -np.ones(K), np.ones(K)]) / (2 * delta * beta)
    W1 = np.full((centers.size, 1), beta)
    b1 = -beta * centers
    W2 = np.vstack([out, -out])
    return Network(act, ((W1, b1), (W2, np.array([0.0, 1.0]))))


def build_weight_band(act: Activation, ref: ReferencePoint, params: WeightParams, eps: float) -> Network:
    """Depth-3 net x -> (psi_1, psi_2) matching (w_1, w_2) to eps off the coarse delta-bands."""
    K, dl, beta = params.K, params.delta, params.beta
    _require(beta, _band_floor(act, K, dl, eps), "beta", "weight_band")
    eps_pi = (eps / 2) / _eta_lipschitz(act, K, dl, beta)
    try:
        pi = cs.build_relative_position(act, ref, GridSpec(1, K, dl), eps_pi, id_share=0.9)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), "weight_band/relative_position") from exc
    net = nc.chain(pi, _eta_layer(act, K, dl, beta))
    linf = nc.norms(net).linf
    cs._check_linf(linf, "weight_band")
    if _heaviside(act):
        bound = 1.0 if act.monotone else 2 * act.tail_constant + 4
    else:
        bound = 1.0 + 2 * K * act.tail_constant / (dl * beta)
    return net.with_meta(kind="weight_band", eps=eps, eps_pi=eps_pi, beta=beta, bound=bound,
                         theory_bound=2 * act.tail_constant + 4, linf=linf)


def _quasi_indicator_net(act: Activation, K: int, delta: float, beta_t: float) -> Network:
    """Depth-2 net for I_1, ramps matching quasi_indicator_eval(form="corrected")."""
    k = np.arange(K + 1)
    lo, hi = k / K, (k + 1) / K
    if _heaviside(act):
        centers = np.concatenate([lo + 1.5 * delta, hi - 1.5 * delta])
        out = np.concatenate([np.ones(K + 1), -np.ones(K + 1)])
    else:
        centers = np.concatenate([lo + delta, lo + 2 * delta, hi - 2 * delta, hi - delta])
        ones = np.ones(K + 1)
        out = np.concatenate([ones, -ones, -ones, ones]) / (delta * beta_t)
    W1 = np.full((centers.size, 1), beta_t)
    return Network(act, ((W1, -beta_t * centers), (out.reshape(1, -1), np.zeros(1))))


def build_weight_global(act: Activation, ref: ReferencePoint, params: WeightParams, eps: float) -> Network:
    """Depth-4 net x -> (g_1, g_2) with |g_i - w_i| <= eps on all of [0,1].

    g_1 multiplies the band net by a quasi-indicator that switches it off
    inside the coarse delta-bands, where w_1 itself nearly vanishes because
    every coarse node is a refined node. g_2 = 1 - g_1.
    """
    K, dl = params.K, params.delta
    e = _global_split(act, eps)
    b_floor, bt_floor = global_floors(act, K, dl, eps)
    _require(params.beta, b_floor, "beta", "weight_global")
    _require(params.beta_tilde, bt_floor, "beta_tilde", "weight_global")
    psi = build_weight_band(act, ref, params, e)
    B_I = _unit_sup(act, e / 2)
    try:
        mu = cs.build_identity(act, ref, B_I, e / 2, 2)
        nu = nc.chain(_quasi_indicator_net(act, K, dl, params.beta_tilde), mu)
        B_psi = psi.meta["bound"]
        B_nu = B_I + e / 2
        prod = cs.build_monomial(act, ref, (1, 1), max(B_psi, B_nu), _PROD_SHARE * eps)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), f"weight_global/{exc.stage}") from exc
    first = nc.select(2, [[1, 0]], None, act)
    both = nc.parallel([nc.chain(psi, first), nu])
    g1 = nc.chain(both, prod)
    net = nc.chain(g1, nc.affine_net([[1.0], [-1.0]], [0.0, 1.0], act))
    linf = nc.norms(net).linf
    cs._check_linf(linf, "weight_global")
    # Global bound on R for both outputs; g_2 = 1 - g_1 adds one.
    bound = 1 + B_psi * B_nu + _PROD_SHARE * eps
    theory = (2 * act.tail_constant + 5) ** 2
    return net.with_meta(kind="weight_global", eps=eps, e_inner=e, beta=params.beta,
                         beta_tilde=params.beta_tilde, bound=bound,
                         theory_bound=theory, linf=linf)


def _weight_products(act: Activation, ref: ReferencePoint, params: WeightParams, d: int,
                     shifts: list[tuple[int, ...]], eps: float) -> Network:
    """Depth-5 net x in [0,1]^d -> (g_v(x))_v for the listed shifts."""
    e = _multi_split(act, d, eps) if d > 1 else eps
    uni = build_weight_global(act, ref, params, e)
    if d == 1:
        rows = [[1.0, 0.0] if v[0] == 1 else [0.0, 1.0] for v in shifts]
        pad = cs.build_identity_stack(act, ref, len(shifts), _w_sup(act, e) + e, eps / 2, 2)
        net = nc.chain_all(uni, nc.select(2, rows, None, act), pad)
        return net.with_meta(bound=_w_sup(act, e) + e + eps / 2, e_uni=e)
    stacked = nc.stack([uni] * d)
    Q = _w_sup(act, e) + e
    try:
        P = cs.build_monomial(act, ref, (1,) * d, Q, eps / 2)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), f"weight_multi/{exc.stage}") from exc
    blocks = []
    for v in shifts:
        sel = np.zeros((d, 2 * d))
        for l, vl in enumerate(v):
            sel[l, 2 * l + vl - 1] = 1.0
        blocks.append(nc.chain(nc.select(2 * d, sel, None, act), P))
    net = nc.chain(stacked, nc.parallel(blocks))
    return net.with_meta(bound=Q**d + eps / 2, e_uni=e)


def build_weight_multi(act: Activation, ref: ReferencePoint, params: WeightParams, v, eps: float) -> Network:
    """Depth-5 net approximating w_v(x) = prod_l w_{v_l}(x_l) to eps on [0,1]^d."""
    v = ShiftIndex(tuple(v.v if isinstance(v, ShiftIndex) else v)).v
    net = _weight_products(act, ref, params, len(v), [v], eps)
    linf = nc.norms(net).linf
    cs._check_linf(linf, "weight_multi")
    return net.with_meta(kind="weight_multi", v=v, eps=eps, linf=linf,
                         theory_bound=(2 * act.tail_constant + 5) ** len(v))


def build_linf_approximator(act: Activation, ref: ReferencePoint, f: TargetFunction, s: float, eps: float,
                            C_cal: float | None = None, mode: str = "taylor",
                            K: int | None = None) -> tuple[Network, ApproxBudget]:
    """Depth-7 network with sup error at most eps on all of [0,1]^d.

    g = sum_v eta(psi_v, nu_v): psi_v are the 2^d shifted depth-6
    approximators, nu_v the weight nets padded to depth 6 and eta a product
    unit. The error budget is split per LINF_SPLIT between psi_v on shifted
    interiors, weight errors, the residual weight inside shifted bands and
    the products. An explicit K overrides the schedule when the local
    polynomials on that grid are accurate enough.
    """
    d = f.d
    if not 0 < eps < 1:
        raise PreconditionFailed("eps must lie in (0, 1)")
    c1 = cs.taylor_remainder_constant(d, s, f.sobolev_bound)
    if C_cal is None:
        C_cal = max(2 * c1, 1e-12)
    if C_cal < 2 * c1 * (1 - 1e-12):
        raise PreconditionFailed(f"C_cal={C_cal:.4g} is below the certified 2*c1={2 * c1:.4g}")
    n_v = 2**d
    sp = LINF_SPLIT
    # Sum over v of |w_v| is 1 for monotone Heaviside-like activations and
    # (1 + 2 e_w)^d otherwise; the cap on e_w below keeps this at most 1.04^d.
    S_w = 1.0 if _heaviside(act) and act.monotone else 1.04**d
    eps1 = sp["psi"] * eps / S_w
    if K is None:
        K = cs.schedule_K(C_cal, eps1, s)
    elif c1 * K ** (-2 * math.ceil(s)) > eps1 / 2:
        raise PreconditionFailed(f"K={K} is too coarse: polynomial error {c1 * K ** (-2 * math.ceil(s)):.3g} "
                                 f"> {eps1 / 2:.3g}")
    delta = 1.0 / (24 * K * K)
    cs.precheck_grid(d, K, delta, "linf_approximator")
    shifts = [sv.v for sv in ShiftIndex.all(d)]
    psis = []
    for v in shifts:
        grid = GridSpec(d, K, delta, v)
        try:
            psis.append(cs.build_shifted_approximator(act, ref, f, s, grid, eps1 / 2, mode))
        except BudgetInfeasible as exc:
            raise BudgetInfeasible(str(exc), f"linf/psi{v}/{exc.stage}") from exc
    B_psi = max(p.meta["bound"] for p in psis)
    F = f.linf
    eps2 = min(sp["weight"] * eps / (n_v * B_psi), 0.25)
    e_w = min(sp["vanish"] * eps / (n_v * (B_psi + F)), 0.02)
    eps_prod = sp["prod"] * eps / n_v
    # |w_v| <= e_w on a shifted band needs one factor below e_w / sup|w|^(d-1).
    e_w1 = e_w / _w_sup(act, e_w) ** (d - 1)
    params = make_weight_params(act, K, eps2 * 0.9, d, delta, beta_min=_vanish_floor(act, delta, e_w1))
    try:
        nu = _weight_products(act, ref, params, d, shifts, eps2 * 0.9)
        B_nu0 = nu.meta["bound"]
        nu = nc.chain(nu, cs.build_identity_stack(act, ref, n_v, B_nu0, eps2 * 0.1, 2))
        B_nu = B_nu0 + eps2 * 0.1
        eta = cs._pair_products(act, ref, n_v, max(B_psi, B_nu), eps_prod)
    except BudgetInfeasible as exc:
        raise BudgetInfeasible(str(exc), f"linf/{exc.stage}") from exc
    net = nc.chain(nc.parallel(psis + [nu]), eta)
    linf = nc.norms(net).linf
    cs._check_linf(linf, "linf_approximator")
    budget = ApproxBudget(eps, s, d, K, delta, C_cal, psis[0].meta["poly"].C_coef, eps)
    budget.record(eps_psi=eps1, eps_poly=psis[0].meta["eps_poly"], eps_weight=eps2, eps_vanish=e_w,
                  eps_prod=eps_prod, beta=params.beta, beta_tilde=params.beta_tilde,
                  bound_psi=B_psi, bound_nu=B_nu, c1=c1)
    bound = n_v * (B_psi * B_nu + eps_prod)
    net = net.with_meta(kind="linf_approximator", eps=eps, K=K, delta=delta, bound=bound,
                        params=params, linf=linf)
    return net, budget
