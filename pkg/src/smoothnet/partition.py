"""Hierarchical grid geometry on [0,1]^d.

Coarse cells have side 1/K and are indexed by i in [K]^d (1-based); each is
split into K^d refined cells of side 1/K^2 indexed by j. Interiors are open
boxes shrunk by delta, bands are the leftover collars. A shift v in [2]^d
translates the refined grid by half a refined cell along every axis with
v_l = 2; shifted cells are clipped to [0,1] but keep the interior of the
unclipped cell, so the domain boundary itself is never a band of a shifted
grid.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, OutOfDomain


class Level(enum.Enum):
    COARSE = "coarse"
    REFINED = "refined"


@dataclass(frozen=True)
class GridSpec:
    d: int
    K: int
    delta: float
    shift: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.d < 1 or self.d > 3:
            raise ValueError("d must be 1, 2 or 3")
        if self.K < 1:
            raise ValueError("K must be a positive integer")
        if not (0 < self.delta < 1.0 / (3 * self.K**2)):
            raise ValueError(f"delta must lie in (0, 1/(3K^2)) = (0, {1 / (3 * self.K**2):.6g})")
        if self.K**self.d > 10**6:
            raise ValueError("K^d exceeds the width budget 10^6")
        if self.shift is not None:
            if len(self.shift) != self.d or any(v not in (1, 2) for v in self.shift):
                raise ValueError("shift must be a tuple in {1,2}^d")
            object.__setattr__(self, "shift", tuple(int(v) for v in self.shift))

    @property
    def v(self) -> tuple[int, ...]:
        return self.shift if self.shift is not None else (1,) * self.d

    @property
    def offset(self) -> np.ndarray:
        """Translation z = x + offset taking the shifted grid onto the standard one."""
        return np.array([(vl - 1) / (2.0 * self.K**2) for vl in self.v])

    @property
    def ncoarse(self) -> tuple[int, ...]:
        """Coarse cells per axis in the translated frame (one extra when shifted)."""
        return tuple(self.K + (vl - 1) for vl in self.v)

    @property
    def extent(self) -> np.ndarray:
        """Upper end of the translated frame along each axis."""
        return np.array(self.ncoarse, dtype=float) / self.K

    def unshifted(self) -> "GridSpec":
        return GridSpec(self.d, self.K, self.delta)

    def with_delta(self, delta: float) -> "GridSpec":
        return GridSpec(self.d, self.K, delta, self.shift)

    def coarse_indices(self):
        return list(itertools.product(*(range(1, n + 1) for n in self.ncoarse)))

    def refined_indices(self):
        return list(itertools.product(range(1, self.K + 1), repeat=self.d))


def _as_points(x, d: int) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim <= 1:
        X = X.reshape(1, -1) if d > 1 or X.ndim == 1 and X.size == d else X.reshape(-1, 1)
    if X.shape[-1] != d:
        raise ValueError(f"points must have {d} coordinates")
    return X


def _check_domain(X: np.ndarray) -> None:
    if np.any(X < 0) or np.any(X > 1) or not np.all(np.isfinite(X)):
        raise OutOfDomain("points must lie in [0,1]^d")


def coarse_index(grid: GridSpec, x) -> tuple[int, ...]:
    X = np.asarray(x, dtype=float).reshape(-1)
    if X.size != grid.d:
        raise ValueError("point dimension mismatch")
    _check_domain(X)
    return tuple(int(min(np.floor(grid.K * xl) + 1, grid.K)) for xl in X)


def coarse_index_array(grid: GridSpec, X) -> np.ndarray:
    X = _as_points(X, grid.d)
    _check_domain(X)
    return np.minimum(np.floor(grid.K * X).astype(int) + 1, grid.K)


def refined_index(grid: GridSpec, x) -> tuple[tuple[int, ...], tuple[int, ...]]:
    X = np.asarray(x, dtype=float).reshape(-1)
    if X.size != grid.d:
        raise ValueError("point dimension mismatch")
    _check_domain(X)
    K = grid.K
    flat = [int(min(np.floor(K * K * xl), K * K - 1)) for xl in X]
    return tuple(f // K + 1 for f in flat), tuple(f % K + 1 for f in flat)


def refined_index_array(grid: GridSpec, X):
    X = _as_points(X, grid.d)
    _check_domain(X)
    K = grid.K
    flat = np.minimum(np.floor(K * K * X).astype(int), K * K - 1)
    return flat // K + 1, flat % K + 1


def corner(grid: GridSpec, i) -> np.ndarray:
    i = tuple(int(v) for v in np.atleast_1d(i))
    if len(i) != grid.d or any(v < 1 or v > grid.K for v in i):
        raise IndexOutOfRange(f"coarse index {i} outside [{grid.K}]^{grid.d}")
    return np.array([(v - 1) / grid.K for v in i])


def _node_distance(X: np.ndarray, spacing: float, phase: float) -> np.ndarray:
    """Distance from each coordinate to the lattice {m * spacing - phase}."""
    u = (X + phase) / spacing
    return np.abs(u - np.round(u)) * spacing


def _level_spacing(grid: GridSpec, level: Level) -> float:
    return 1.0 / grid.K if level is Level.COARSE else 1.0 / grid.K**2


def interior_mask(grid: GridSpec, X, level: Level = Level.REFINED, shift=None,
                  delta: float | None = None) -> np.ndarray:
    """Vectorized open-box interior membership for points X (n, d)."""
    X = _as_points(X, grid.d)
    v = grid.v if shift is None else tuple(shift)
    dl = grid.delta if delta is None else delta
    phase = np.array([(vl - 1) / (2.0 * grid.K**2) for vl in v])
    dist = _node_distance(X, _level_spacing(grid, level), phase)
    # Points within roundoff of a band face count as band (the safe side).
    return np.all(dist > dl * (1 + 1e-12), axis=1)


def in_interior(grid: GridSpec, x, level: Level = Level.COARSE, shift=None) -> bool:
    X = np.asarray(x, dtype=float).reshape(1, -1)
    _check_domain(X)
    if shift is not None and not grid.delta < 1.0 / (6 * grid.K**2):
        raise ValueError("shifted interiors need delta < 1/(6K^2)")
    return bool(interior_mask(grid, X, level, shift)[0])


def in_band(grid: GridSpec, x, level: Level = Level.COARSE, shift=None) -> bool:
    return not in_interior(grid, x, level, shift)


def band_mask(grid: GridSpec, X, level: Level = Level.REFINED, shift=None,
              delta: float | None = None) -> np.ndarray:
    return ~interior_mask(grid, X, level, shift, delta)


@dataclass(frozen=True)
class BandMeasure:
    exact: float
    theory_bound: float
    monte_carlo: float
    mc_stderr: float


def band_measure(grid: GridSpec, level: Level = Level.REFINED, n_samples: int = 10**6,
                 seed: int = 0) -> BandMeasure:
    """Measure of the union of (unshifted) bands, exact and by Monte Carlo."""
    n_nodes = grid.K if level is Level.COARSE else grid.K**2
    # Per axis the band is 2*delta around every interior node and delta at 0 and 1.
    per_axis = min(1.0, 2.0 * grid.delta * n_nodes)
    exact = 1.0 - (1.0 - per_axis) ** grid.d
    theory = 2.0 * grid.d * n_nodes * grid.delta
    rng = np.random.default_rng(seed)
    X = rng.random((n_samples, grid.d))
    hits = band_mask(grid.unshifted(), X, level).astype(float)
    return BandMeasure(exact, theory, float(hits.mean()), float(hits.std(ddof=1) / np.sqrt(n_samples)))


def coarse_band_mask_1d(x, K: int, delta: float, kind: int = 1) -> np.ndarray:
    """Coarse band around k/K (kind 1) or around (2k+1)/(2K) (kind 2), closed."""
    x = np.asarray(x, dtype=float)
    phase = 0.0 if kind == 1 else 0.5 / K
    return _node_distance(x, 1.0 / K, phase) <= delta


# ----------------------------------------------------- piecewise constants

def pwc_direct(grid: GridSpec, coeffs: np.ndarray, X) -> np.ndarray:
    """sum_{i,j} c_{i,j} 1_{Omega_{i,j}}(x) for an unshifted grid.

    ``coeffs`` has shape (K,)*d + (K,)*d, coarse axes first.
    """
    i, j = refined_index_array(grid, X)
    idx = tuple((i - 1).T) + tuple((j - 1).T)
    return coeffs[idx]


def pwc_multiscale(grid: GridSpec, coeffs: np.ndarray, X) -> np.ndarray:
    """Same function written as sum_j C_j(x) 1_{Omega_{1,j}}(x - a(x))."""
    X = _as_points(X, grid.d)
    K, d = grid.K, grid.d
    i = coarse_index_array(grid, X)
    rel = X - (i - 1) / K
    out = np.zeros(X.shape[0])
    j_of = np.minimum(np.floor(rel * K * K).astype(int) + 1, K)
    for j in grid.refined_indices():
        Cj = coeffs[tuple((i - 1).T) + tuple(np.full(X.shape[0], jl - 1) for jl in j)]
        out += Cj * np.all(j_of == np.array(j), axis=1)
    return out


def shifted_cover_count(grid: GridSpec, X) -> np.ndarray:
    """Number of shifts v in [2]^d whose refined interior contains each point."""
    X = _as_points(X, grid.d)
    count = np.zeros(X.shape[0], dtype=int)
    for v in itertools.product((1, 2), repeat=grid.d):
        count += interior_mask(grid, X, Level.REFINED, v)
    return count
