"""Particle configurations on a finite lattice window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class Configuration:
    """Occupation numbers on sites ``window_lo..window_hi``.

    Particles that jump off ``window_hi`` are kept in ``sink_count``, so
    ``counts.sum() + sink_count`` is conserved by the dynamics.
    """

    window_lo: int
    window_hi: int
    counts: np.ndarray
    sink_count: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.window_hi < self.window_lo:
            raise DomainError("empty window")
        if self.counts.shape != (self.window_hi - self.window_lo + 1,):
            raise DomainError(
                f"counts has shape {self.counts.shape}, window needs {self.window_hi - self.window_lo + 1}"
            )
        if (self.counts < 0).any():
            raise DomainError("occupation numbers must be nonnegative")

    @classmethod
    def zeros(cls, window_lo: int, window_hi: int) -> "Configuration":
        return cls(window_lo, window_hi, np.zeros(window_hi - window_lo + 1, dtype=np.int64))

    @classmethod
    def from_sites(cls, window_lo: int, window_hi: int, occupied: dict[int, int]) -> "Configuration":
        conf = cls.zeros(window_lo, window_hi)
        for site, k in occupied.items():
            conf[site] = k
        return conf

    @property
    def n_sites(self) -> int:
        return self.window_hi - self.window_lo + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.window_lo, self.window_hi + 1)

    @property
    def total(self) -> int:
        """Particles in the window plus those in the sink."""
        return int(self.counts.sum()) + int(self.sink_count)

    def index(self, site: int) -> int:
        if not (self.window_lo <= site <= self.window_hi):
            raise DomainError(f"site {site} outside window [{self.window_lo}, {self.window_hi}]")
        return site - self.window_lo

    def __getitem__(self, site: int) -> int:
        return int(self.counts[self.index(site)])

    def __setitem__(self, site: int, value: int):
        if value < 0:
            raise DomainError("occupation numbers must be nonnegative")
        self.counts[self.index(site)] = value

    def copy(self) -> "Configuration":
        return Configuration(self.window_lo, self.window_hi, self.counts.copy(), self.sink_count)

    def __le__(self, other: "Configuration") -> bool:
        _same_window(self, other)
        return bool((self.counts <= other.counts).all())


def _same_window(a: Configuration, b: Configuration):
    if (a.window_lo, a.window_hi) != (b.window_lo, b.window_hi):
        raise DomainError("configurations live on different windows")
