"""Smooth activations with exact high-order derivatives.

Each activation carries its tail class (how it approaches the Heaviside step
or the ReLU at infinity), the certified tail constant and a Lipschitz bound.
Derivatives are computed from closed-form recurrences rather than finite
differences, which lose all accuracy beyond order four or so in float64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit, ndtr

from .errors import CertificationFailed, NoReferenceFound, OrderTooHigh

MAX_ORDER = 10
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Kind(enum.Enum):
    SIGMOID = "sigmoid"
    TANH_SHIFTED = "tanh_shifted"
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"


class TailClass(enum.Enum):
    HEAVISIDE_LIKE = "heaviside_like"
    RELU_LIKE = "relu_like"
    EXACT_RELU = "exact_relu"


@lru_cache(maxsize=None)
def _stirling2(n: int, k: int) -> int:
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    return k * _stirling2(n - 1, k) + _stirling2(n - 1, k - 1)


@lru_cache(maxsize=None)
def _sigmoid_poly(m: int) -> tuple[int, ...]:
    """Integer coefficients c_k with sigma^(m) = sum_k c_k sigma^k, k = 0..m+1."""
    if m == 0:
        return (0, 1)
    coeffs = [0] * (m + 2)
    for k in range(1, m + 2):
        coeffs[k] = (-1) ** (k - 1) * math.factorial(k - 1) * _stirling2(m + 1, k)
    return tuple(coeffs)


@lru_cache(maxsize=None)
def _hermite_he(n: int) -> tuple[int, ...]:
    """Coefficients (ascending) of the probabilists' Hermite polynomial He_n."""
    prev, cur = (1,), (0, 1)
    if n == 0:
        return prev
    for j in range(1, n):
        nxt = [0] * (j + 2)
        for i, c in enumerate(cur):
            nxt[i + 1] += c
        for i, c in enumerate(prev):
            nxt[i] -= j * c
        prev, cur = cur, tuple(nxt)
    return cur


@lru_cache(maxsize=None)
def _gelu_poly(m: int) -> tuple[int, ...]:
    """P_m with GELU^(m)(t) = (-1)^(m-1) * pdf(t) * P_m(t) for m >= 2."""
    a = list(_hermite_he(m))
    b = _hermite_he(m - 2)
    for i, c in enumerate(b):
        a[i] -= c
    return tuple(a)


def _horner(coeffs: tuple[int, ...], x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


def _sigmoid_derivative(m: int, t: np.ndarray) -> np.ndarray:
    if m == 0:
        return expit(t)
    # Evaluate on the negative half-line, where sigma is small and the
    # alternating Stirling sum does not cancel, then reflect by parity.
    neg = -np.abs(t)
    val = _horner(_sigmoid_poly(m), expit(neg))
    sign = (-1.0) ** (m + 1)
    return np.where(t > 0, sign * val, val)


def _normal_cdf_derivative(k: int, t: np.ndarray) -> np.ndarray:
    if k == 0:
        return ndtr(t)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    return (-1.0) ** (k - 1) * _horner(_hermite_he(k - 1), t) * pdf


@dataclass(frozen=True)
class Activation:
    kind: Kind
    tail_class: TailClass
    lipschitz: float
    tail_constant: float
    monotone: bool = field(default=True)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def smooth(self) -> bool:
        return self.kind is not Kind.RELU

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = self.kind
        if k is Kind.SIGMOID:
            return expit(t)
        if k is Kind.TANH_SHIFTED:
            return expit(2.0 * t)
        if k is Kind.SILU:
            return t * expit(t)
        if k is Kind.GELU:
            return t * ndtr(t)
        return np.maximum(t, 0.0)

    def derivative(self, m: int, t):
        if m < 0:
            raise ValueError("derivative order must be nonnegative")
        if m > MAX_ORDER:
            raise OrderTooHigh(f"order {m} exceeds the engine maximum {MAX_ORDER}")
        t = np.asarray(t, dtype=np.float64)
        if m == 0:
            return self.eval(t)
        k = self.kind
        if k is Kind.SIGMOID:
            return _sigmoid_derivative(m, t)
        if k is Kind.TANH_SHIFTED:
            return 2.0**m * _sigmoid_derivative(m, 2.0 * t)
        if k is Kind.SILU:
            return t * _sigmoid_derivative(m, t) + m * _sigmoid_derivative(m - 1, t)
        if k is Kind.GELU:
            if m == 1:
                return ndtr(t) + t * _INV_SQRT_2PI * np.exp(-0.5 * t * t)
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
            return (-1.0) ** (m - 1) * pdf * _horner(_gelu_poly(m), t)
        # ReLU: subgradient 0 at the kink, zero curvature elsewhere.
        if m == 1:
            return (t > 0).astype(np.float64)
        return np.zeros_like(t)

    def tail_reference(self, t):
        """H(t) for Heaviside-like activations, ReLU(t) otherwise."""
        t = np.asarray(t, dtype=np.float64)
        if self.tail_class is TailClass.HEAVISIDE_LIKE:
            return (t >= 0).astype(np.float64)
        return np.maximum(t, 0.0)


# Lipschitz constants are sup |phi'| rounded up in the fourth digit.
SIGMOID = Activation(Kind.SIGMOID, TailClass.HEAVISIDE_LIKE, 0.25, 1.0)
TANH_SHIFTED = Activation(Kind.TANH_SHIFTED, TailClass.HEAVISIDE_LIKE, 0.5, 1.0)
SILU = Activation(Kind.SILU, TailClass.RELU_LIKE, 1.0999, 1.0, monotone=False)
GELU = Activation(Kind.GELU, TailClass.RELU_LIKE, 1.1290, _INV_SQRT_2PI, monotone=False)
RELU = Activation(Kind.RELU, TailClass.EXACT_RELU, 1.0, 0.0)

_BY_NAME = {a.name: a for a in (SIGMOID, TANH_SHIFTED, SILU, GELU, RELU)}
SMOOTH = (SIGMOID, TANH_SHIFTED, SILU, GELU)


def get(name: str) -> Activation:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_BY_NAME)}") from None


def eval(act: Activation, t):  # noqa: A001 - mirrors the operation name
    return act.eval(t)


def derivative(act: Activation, m: int, t):
    return act.derivative(m, t)


@dataclass(frozen=True)
class TailReport:
    activation: str
    tail_class: TailClass
    tail_constant: float
    max_deviation: float
    implied_constant: float
    witness: float


def probe_grid(lo: float = -50.0, hi: float = 50.0, step: float = 0.005) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.linspace(lo, hi, n + 1)


def verify_tail_class(act: Activation, grid: np.ndarray | None = None,
                      tail_constant: float | None = None) -> TailReport:
    """Check the tail inequality on a finite grid (a certification, not a proof)."""
    if act.tail_class is TailClass.EXACT_RELU:
        raise ValueError("ReLU has no tail class to certify")
    t = probe_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if t.min() > -50 or t.max() < 50 or np.max(np.diff(np.sort(t))) > 0.01 + 1e-12:
        raise ValueError("probe grid must cover [-50, 50] with spacing <= 0.01")
    c = act.tail_constant if tail_constant is None else tail_constant
    dev = np.abs(act.eval(t) - act.tail_reference(t))
    if act.tail_class is TailClass.HEAVISIDE_LIKE:
        scaled = dev * np.maximum(1.0, np.abs(t))
    else:
        scaled = dev
    i = int(np.argmax(scaled))
    report = TailReport(act.name, act.tail_class, c, float(dev.max()), float(scaled[i]), float(t[i]))
    if scaled[i] > c:
        raise CertificationFailed(
            f"{act.name}: tail inequality violated at t={t[i]!r} "
            f"(needs constant {scaled[i]:.6g} > {c:.6g})", witness=float(t[i]))
    return report


@dataclass(frozen=True)
class ReferencePoint:
    t0: float
    max_order: int
    derivative_values: tuple[float, ...]
    min_abs_derivative: float

    def value(self, m: int) -> float:
        return self.derivative_values[m]


def find_reference_point(act: Activation, m_max: int) -> ReferencePoint:
    """Grid search on [-3, 3] for t0 maximizing min_{1<=m<=m_max} |phi^(m)(t0)|."""
    if not act.smooth:
        raise NoReferenceFound("ReLU is piecewise linear; no point has nonzero curvature")
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    if m_max > MAX_ORDER:
        raise OrderTooHigh(f"order {m_max} exceeds the engine maximum {MAX_ORDER}")
    t = np.round(np.arange(-300, 301) * 0.01, 12)
    score = np.full(t.shape, np.inf)
    for m in range(1, m_max + 1):
        score = np.minimum(score, np.abs(act.derivative(m, t)))
    i = int(np.argmax(score))
    if score[i] < 1e-10:
        raise NoReferenceFound(f"{act.name}: best min |phi^(m)| is {score[i]:.3g}")
    t0 = float(t[i])
    vals = tuple(float(act.derivative(m, t0)) for m in range(m_max + 1))
    return ReferencePoint(t0, m_max, vals, float(score[i]))


def sup_abs_derivative(act: Activation, m: int, center: float, radius: float) -> float:
    """Upper estimate of sup |phi^(m)| on [center - radius, center + radius].

    Sampled on a 1e-3 grid; the sampling gap is covered by adding the next
    derivative's sampled maximum times half the step.
    """
    step = 1e-3
    n = max(2, int(math.ceil(2 * radius / step)) + 1)
    t = np.linspace(center - radius, center + radius, n)
    h = (t[1] - t[0]) if n > 1 else 0.0
    base = float(np.max(np.abs(act.derivative(m, t))))
    if m + 1 <= MAX_ORDER:
        base += 0.5 * h * float(np.max(np.abs(act.derivative(m + 1, t))))
    return base
