"""Heights, currents, model constants and the TASEP correspondence."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, InvariantViolation
from .state import Configuration, _same_window

__all__ = [
    "int_toward_zero",
    "initial_height",
    "initial_heights",
    "HeightLedger",
    "CurrentSample",
    "current_at",
    "heights_now",
    "flux",
    "characteristic_speed",
    "model_constants",
    "count_interval_defects",
    "tasep_view",
    "TasepState",
    "tasep_from_zrp",
    "tasep_step_direct",
    "gaps_from_positions",
]


def int_toward_zero(x: float) -> int:
    """[x]: floor for x >= 0, ceiling for x < 0."""
    if not math.isfinite(x):
        raise DomainError(f"[x] needs a finite argument, got {x}")
    return math.floor(x) if x >= 0 else math.ceil(x)


def initial_height(config: Configuration, i: int) -> int:
    """h_i(0) with the normalisation h_0(0) = 0."""
    config.index(i)
    if i < 0:
        return int(config.counts[config.index(i + 1): config.index(0) + 1].sum())
    if i == 0:
        return 0
    return -int(config.counts[config.index(1): config.index(i) + 1].sum())


def initial_heights(config: Configuration) -> np.ndarray:
    """h_i(0) for every site of the window (origin must be inside)."""
    x0 = config.index(0)
    cum = np.cumsum(config.counts)
    # h_i = -(sum_{j<=i} w_j - sum_{j<=0} w_j)
    return -(cum - cum[x0])


class HeightLedger:
    """Column heights over a window; indexable by site."""

    def __init__(self, window_lo: int, values: np.ndarray):
        self.window_lo = int(window_lo)
        self.values = np.asarray(values, dtype=np.int64)

    @classmethod
    def initial(cls, config: Configuration) -> "HeightLedger":
        return cls(config.window_lo, initial_heights(config))

    def __getitem__(self, site: int) -> int:
        x = site - self.window_lo
        if not (0 <= x < self.values.size):
            raise DomainError(f"no height tracked at site {site}")
        return int(self.values[x])

    def occupations(self) -> np.ndarray:
        """omega_i = h_{i-1} - h_i for the sites after the first."""
        return self.values[:-1] - self.values[1:]


class CurrentSample(tuple):
    __slots__ = ()

    def __new__(cls, V, t, J):
        return super().__new__(cls, (V, t, J))

    V = property(lambda self: self[0])
    t = property(lambda self: self[1])
    J = property(lambda self: self[2])

    def __repr__(self):
        return f"CurrentSample(V={self.V}, t={self.t}, J={self.J})"


def heights_now(ens, config_index: int) -> HeightLedger:
    """Current heights h_i(t) = h_i(0) + jumps across bond i."""
    return HeightLedger(ens.window_lo, ens.h0[config_index] + ens.bonds[config_index])


def current_at(ens, config_index: int, V: float, t: float) -> CurrentSample:
    """J^(V)(t) of one configuration; ``ens`` must have been advanced to ``t``."""
    b = int_toward_zero(V * t)
    x = b - ens.window_lo
    if not (0 <= x < ens.n_sites):
        raise DomainError(f"bond {b} is not tracked")
    return CurrentSample(V, t, int(ens.h0[config_index, x] + ens.bonds[config_index, x]))


def flux(rho: float) -> float:
    return rho / (1.0 + rho)


def characteristic_speed(rho: float) -> float:
    return 1.0 / (1.0 + rho) ** 2


def model_constants(rho: float) -> tuple[float, float, float]:
    """(flux, characteristic speed, one-site variance) at density ``rho``."""
    if rho < 0 or not math.isfinite(rho):
        raise DomainError(f"density must be finite and >= 0, got {rho}")
    return flux(rho), characteristic_speed(rho), rho * (1.0 + rho)


def count_interval_defects(eta: Configuration, omega: Configuration, j: int, u: int) -> int:
    """Number of omega - eta discrepancies on sites j+1 .. j+2u-1."""
    _same_window(eta, omega)
    if u < 1:
        raise DomainError("u must be a positive integer")
    a, b = j + 1, j + 2 * u - 1
    if a < eta.window_lo or b > eta.window_hi:
        raise DomainError(f"interval [{a}, {b}] leaves the window")
    sl = slice(a - eta.window_lo, b - eta.window_lo + 1)
    diff = omega.counts[sl] - eta.counts[sl]
    if (diff < 0).any():
        raise DomainError("eta is not below omega on the interval")
    return int(diff.sum())


# ---------------------------------------------------------------------------
# TASEP


def tasep_view(heights, k: int) -> int:
    """Position of TASEP particle ``k``: R_k = -h_k + k."""
    return -heights[k] + k


class TasepState:
    """Left-moving TASEP particles with labels ``k_lo .. k_hi``.

    Occupied lattice sites are kept in a set so that blocking is decided by
    the exclusion rule itself, independently of the gap variables.  Only
    labels in ``mobile`` ever move.
    """

    def __init__(self, k_lo: int, positions, mobile: range):
        self.k_lo = int(k_lo)
        self.positions = np.asarray(positions, dtype=np.int64).copy()
        if np.any(np.diff(self.positions) <= 0):
            raise InvariantViolation("particle positions must increase strictly")
        self.occupied = set(int(p) for p in self.positions)
        self.mobile = mobile

    @property
    def k_hi(self) -> int:
        return self.k_lo + self.positions.size - 1

    def __getitem__(self, k: int) -> int:
        return int(self.positions[k - self.k_lo])


def tasep_from_zrp(config: Configuration) -> TasepState:
    """TASEP whose gaps are the ZRP occupations, with particle 0 at site 0.

    Particles ``window_lo - 1`` and ``window_hi + 1`` are frozen walls: the
    first has no clock inside the window and the second stands for the sink.
    """
    lo, hi = config.window_lo, config.window_hi
    gaps = np.concatenate([config.counts, [config.sink_count]])  # gaps for labels lo..hi+1
    steps = gaps + 1
    # R_k - R_{k-1} = w_k + 1 for k = lo..hi+1
    rel = np.concatenate([[0], np.cumsum(steps)])  # R_k - R_{lo-1}
    labels = np.arange(lo - 1, hi + 2)
    r0 = rel[0 - (lo - 1)]
    return TasepState(lo - 1, rel - r0, range(lo, hi + 1))


def tasep_step_direct(state: TasepState, k: int) -> TasepState:
    """Ring of particle ``k``: it steps left iff the site to its left is empty."""
    if k not in state.mobile:
        return state
    i = k - state.k_lo
    r = int(state.positions[i])
    if (r - 1) in state.occupied:
        return state
    state.occupied.remove(r)
    state.occupied.add(r - 1)
    state.positions[i] = r - 1
    if i > 0 and state.positions[i - 1] >= r - 1:
        raise InvariantViolation(f"TASEP particle {k} passed particle {k - 1}")
    return state


def gaps_from_positions(positions) -> np.ndarray:
    """omega_i = R_i - R_{i-1} - 1 for consecutive labels."""
    positions = np.asarray(positions)
    return positions[1:] - positions[:-1] - 1
