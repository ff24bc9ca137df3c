"""Occupation laws of the constant-rate TAZRP and their monotone couplings.

Three families appear: the geometric law with mean ``rho`` (the stationary
one-site marginal), its two-fold convolution (the perturbed marginal used to
plant a defect at a site) and the negative binomial law of a block of ``n``
geometric sites.  All three are ``NegBin(n, rho)`` with ``n = 1, 2, n``, so
stochastic domination between them is ordering in both ``n`` and ``rho``.

Sampling goes through the quantile function, so one uniform per site
realises any coupling of two ordered laws (common-uniform coupling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from numbers import Integral, Real

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = [
    "LawId",
    "geometric_pmf",
    "geometric_cdf",
    "mu_hat_pmf",
    "mu_hat_cdf",
    "negbin_pmf",
    "negbin_cdf",
    "pmf",
    "cdf",
    "sample_via_quantile",
    "quantile_array",
    "couple_monotone",
    "dominates",
    "sample_mu_hat_sum",
]

# below this ratio rho/(1+rho) the closed-form geometric inversion loses digits
_SMALL_RATIO = 1e-12


def _check_density(rho) -> float:
    if isinstance(rho, bool) or not isinstance(rho, Real):
        raise DomainError(f"density must be a real number, got {rho!r}")
    rho = float(rho)
    if not math.isfinite(rho) or rho < 0:
        raise DomainError(f"density must be finite and >= 0, got {rho}")
    return rho


def _check_count(k, name="k") -> int:
    if isinstance(k, bool) or not isinstance(k, Integral):
        raise DomainError(f"{name} must be an integer, got {k!r}")
    k = int(k)
    if k < 0:
        raise DomainError(f"{name} must be >= 0, got {k}")
    return k


def _ratio(rho: float) -> float:
    return rho / (1.0 + rho)


@dataclass(frozen=True)
class LawId:
    """Identifies one of the occupation laws.

    ``kind`` is ``"geometric"``, ``"muhat"`` or ``"negbin"``; ``n`` is the
    number of geometric summands (1, 2 or the negative binomial order).
    """

    kind: str
    rho: float
    n: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rho", _check_density(self.rho))
        if self.kind == "geometric":
            object.__setattr__(self, "n", 1)
        elif self.kind == "muhat":
            object.__setattr__(self, "n", 2)
        elif self.kind == "negbin":
            if isinstance(self.n, bool) or not isinstance(self.n, Integral) or self.n < 1:
                raise DomainError(f"negative binomial order must be an integer >= 1, got {self.n!r}")
            object.__setattr__(self, "n", int(self.n))
        else:
            raise DomainError(f"unknown law kind {self.kind!r}")

    @classmethod
    def geometric(cls, rho) -> "LawId":
        return cls("geometric", rho)

    @classmethod
    def muhat(cls, rho) -> "LawId":
        return cls("muhat", rho)

    @classmethod
    def negbin(cls, n, rho) -> "LawId":
        return cls("negbin", rho, n)

    @property
    def mean(self) -> float:
        return self.n * self.rho

    def __str__(self) -> str:
        if self.kind == "negbin":
            return f"NegBin({self.n}, {self.rho:g})"
        return f"{'Geometric' if self.kind == 'geometric' else 'MuHat'}({self.rho:g})"


# ---------------------------------------------------------------------------
# mass functions


def geometric_pmf(rho, k) -> float:
    """P(omega = k) for the geometric law with mean ``rho``."""
    rho = _check_density(rho)
    k = _check_count(k)
    p = _ratio(rho)
    return p**k / (1.0 + rho)


def geometric_cdf(rho, z) -> float:
    """P(omega <= z) = 1 - (rho/(1+rho))**(z+1)."""
    rho = _check_density(rho)
    z = _check_count(z, "z")
    return 1.0 - _ratio(rho) ** (z + 1)


def mu_hat_pmf(rho, k) -> float:
    """Mass function of the sum of two independent geometric(rho) variables."""
    rho = _check_density(rho)
    k = _check_count(k)
    p = _ratio(rho)
    q = 1.0 / (1.0 + rho)
    return (k + 1) * p**k * q * q


def mu_hat_cdf(rho, z) -> float:
    rho = _check_density(rho)
    z = _check_count(z, "z")
    p = _ratio(rho)
    # P(X > z) = p^(z+1) * (1 + (z+1)(1-p))
    return 1.0 - p ** (z + 1) * (1.0 + (z + 1) * (1.0 - p))


def negbin_pmf(n, lam, z) -> float:
    """C(n+z-1, n-1) (lam/(1+lam))**z (1/(1+lam))**n.

    This is the law of the particle count on a block of ``n`` i.i.d.
    geometric(lam) sites.
    """
    if isinstance(n, bool) or not isinstance(n, Integral) or n < 1:
        raise DomainError(f"n must be an integer >= 1, got {n!r}")
    lam = _check_density(lam)
    z = _check_count(z, "z")
    n = int(n)
    if lam == 0.0:
        return 1.0 if z == 0 else 0.0
    p = _ratio(lam)
    logc = math.lgamma(n + z) - math.lgamma(n) - math.lgamma(z + 1)
    return math.exp(logc + z * math.log(p) - n * math.log1p(lam))


def negbin_cdf(n, lam, z) -> float:
    if isinstance(n, bool) or not isinstance(n, Integral) or n < 1:
        raise DomainError(f"n must be an integer >= 1, got {n!r}")
    lam = _check_density(lam)
    z = _check_count(z, "z")
    n = int(n)
    if n == 1:
        return geometric_cdf(lam, z)
    if n == 2:
        return mu_hat_cdf(lam, z)
    p = _ratio(lam)
    term = (1.0 / (1.0 + lam)) ** n
    total = term
    for k in range(z):
        term *= (n + k) / (k + 1) * p
        total += term
    return min(total, 1.0)


def pmf(law: LawId, k) -> float:
    if law.kind == "geometric":
        return geometric_pmf(law.rho, k)
    if law.kind == "muhat":
        return mu_hat_pmf(law.rho, k)
    return negbin_pmf(law.n, law.rho, k)


def cdf(law: LawId, z) -> float:
    if law.kind == "geometric":
        return geometric_cdf(law.rho, z)
    if law.kind == "muhat":
        return mu_hat_cdf(law.rho, z)
    return negbin_cdf(law.n, law.rho, z)


# ---------------------------------------------------------------------------
# quantile sampling


def _check_uniform(u) -> float:
    if isinstance(u, bool) or not isinstance(u, Real):
        raise DomainError(f"u must be a real number, got {u!r}")
    u = float(u)
    if not (0.0 <= u < 1.0):
        raise DomainError(f"u must lie in [0, 1), got {u}")
    return u


def _scan(law: LawId, u: float) -> int:
    z = 0
    while cdf(law, z) <= u:
        z += 1
    return z


def sample_via_quantile(law: LawId, u) -> int:
    """Smallest ``z`` with ``cdf(law, z) > u``."""
    u = _check_uniform(u)
    if law.rho == 0.0:
        return 0
    if law.kind != "geometric":
        return _scan(law, u)
    p = _ratio(law.rho)
    if p < _SMALL_RATIO:
        return _scan(law, u)
    z = int(math.floor(math.log1p(-u) / math.log(p)))
    # align with the CDF as evaluated, so the result is exactly the inverse
    while z > 0 and cdf(law, z - 1) > u:
        z -= 1
    while cdf(law, z) <= u:
        z += 1
    return z


def _cdf_array(law: LawId, z: np.ndarray) -> np.ndarray:
    p = _ratio(law.rho)
    z1 = z + 1.0
    if law.kind == "geometric":
        return 1.0 - p**z1
    if law.kind == "muhat":
        return 1.0 - p**z1 * (1.0 + z1 * (1.0 - p))
    return np.array([negbin_cdf(law.n, law.rho, int(v)) for v in z.ravel()]).reshape(z.shape)


def quantile_array(law: LawId, u: np.ndarray) -> np.ndarray:
    """Vectorised :func:`sample_via_quantile`; returns an int64 array."""
    u = np.asarray(u, dtype=np.float64)
    if u.size and (u.min() < 0.0 or u.max() >= 1.0):
        raise DomainError("uniforms must lie in [0, 1)")
    if law.rho == 0.0:
        return np.zeros(u.shape, dtype=np.int64)
    p = _ratio(law.rho)
    if law.kind == "geometric" and p >= _SMALL_RATIO:
        z = np.floor(np.log1p(-u) / math.log(p)).astype(np.int64)
        z = np.maximum(z, 0)
        # one-step corrections against the evaluated CDF
        down = (z > 0) & (_cdf_array(law, np.maximum(z - 1, 0)) > u)
        z[down] -= 1
        up = _cdf_array(law, z) <= u
        while up.any():
            z[up] += 1
            up = _cdf_array(law, z) <= u
        return z
    z = np.zeros(u.shape, dtype=np.int64)
    todo = _cdf_array(law, z) <= u
    while todo.any():
        z[todo] += 1
        todo = _cdf_array(law, z) <= u
    return z


def dominates(law_lo: LawId, law_hi: LawId) -> bool:
    """True when ``law_lo <= law_hi`` stochastically by the NegBin ordering."""
    if law_lo.rho == 0.0:
        return True
    return law_lo.n <= law_hi.n and law_lo.rho <= law_hi.rho


def couple_monotone(law_lo: LawId, law_hi: LawId, u) -> tuple[int, int]:
    """Common-uniform coupling of two ordered laws; always ``k_lo <= k_hi``."""
    if not dominates(law_lo, law_hi):
        raise ConfigurationError(f"{law_lo} is not dominated by {law_hi}")
    k_lo = sample_via_quantile(law_lo, u)
    k_hi = sample_via_quantile(law_hi, u)
    if k_lo > k_hi:
        raise AssertionError(f"quantile coupling broke order at u={u!r}: {k_lo} > {k_hi}")
    return k_lo, k_hi


def sample_mu_hat_sum(rho, rng: np.random.Generator, size=None):
    """Sample the perturbed law as a sum of two independent geometric draws.

    Not monotone in ``rho`` for a fixed seed; couplings use the quantile path.
    """
    rho = _check_density(rho)
    if rho == 0.0:
        return np.zeros(size, dtype=np.int64) if size is not None else 0
    q = 1.0 / (1.0 + rho)
    # numpy's geometric counts trials, starting at 1
    x = rng.geometric(q, size=size) - 1
    y = rng.geometric(q, size=size) - 1
    return x + y
