"""Replica ensembles, estimators and the verification suite.

Every experiment runs independent replicas of one scenario (replica ``r``
draws from ``SeedSequence(seed, spawn_key=(r,))``), reduces each log to a
small record inside the worker and merges records in replica order, so a
rerun with the same seed is bit-identical whatever the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .engine import (
    CoupledEnsemble,
    ObservationLog,
    ScenarioSpec,
    build_window,
    init_scenario,
    init_truncation_pair,
    replica_rng,
    run,
)
from .errors import DomainError, TruncationRiskError
from .measures import LawId, quantile_array
from .observables import (
    characteristic_speed,
    flux,
    heights_now,
    int_toward_zero,
    tasep_from_zrp,
    tasep_step_direct,
)
from .state import Configuration

__all__ = [
    "EnsembleResult",
    "MergedLog",
    "MomentSeries",
    "ExponentFit",
    "IdentityReport",
    "TwoPointReport",
    "OffCharResult",
    "Lemma41Result",
    "TaggedResult",
    "run_ensemble",
    "defect_positions",
    "stationary_currents",
    "mean_stderr",
    "unbiased_variance",
    "jackknife_variance",
    "moment_series",
    "verify_identities",
    "two_point_check",
    "diffusivity_series",
    "fit_exponent",
    "offchar_suite",
    "ks_distance",
    "lemma41_pathwise",
    "tagged_particle_suite",
    "tasep_bijection_check",
    "truncation_audit",
    "two_point_truncation_audit",
]

Z_THRESHOLD = 4.0


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class MergedLog:
    """Observation logs of many replicas stacked along a leading axis."""

    times: np.ndarray
    observers: tuple[float, ...]
    defect_ids: list[str]
    currents: np.ndarray  # (R, C, K, V)
    defect_positions: np.ndarray  # (R, C, D)
    label_zero: np.ndarray | None  # (R, C)
    label_zero_rank: np.ndarray | None
    violations: np.ndarray  # (R,)
    aborted: np.ndarray  # (R,)

    @classmethod
    def from_logs(cls, logs: list[ObservationLog]) -> "MergedLog":
        first = logs[0]
        stack = (lambda name: None if getattr(first, name) is None
                 else np.stack([getattr(g, name) for g in logs]))
        return cls(
            times=first.times,
            observers=first.observers,
            defect_ids=list(first.defect_ids),
            currents=np.stack([g.currents for g in logs]),
            defect_positions=np.stack([g.defect_positions for g in logs]),
            label_zero=stack("label_zero"),
            label_zero_rank=stack("label_zero_rank"),
            violations=np.array([g.violations for g in logs], dtype=np.int64),
            aborted=np.array([g.aborted for g in logs], dtype=bool),
        )

    @property
    def replicas(self) -> int:
        return self.currents.shape[0]

    def defect(self, defect_id: str) -> np.ndarray:
        """(R, C) positions of one defect."""
        return self.defect_positions[:, :, self.defect_ids.index(defect_id)]

    def current(self, config: int = 0, observer: int = 0) -> np.ndarray:
        """(R, C) currents of one configuration at one observer."""
        return self.currents[:, :, config, observer]


@dataclass
class EnsembleResult:
    """Per-replica records in replica order plus run bookkeeping.

    ``valid`` is False as soon as one replica was aborted for truncation
    risk; aborted replicas are counted, never dropped.
    """

    spec: ScenarioSpec
    first_replica: int
    records: list
    aborted: int
    violations: int
    n_events: int

    @property
    def replicas(self) -> int:
        return len(self.records)

    @property
    def valid(self) -> bool:
        return self.aborted == 0

    def merged(self) -> MergedLog:
        if not self.records or not isinstance(self.records[0], ObservationLog):
            raise TypeError("merged() needs the default (identity) reducer")
        return MergedLog.from_logs(self.records)

    def require_valid(self):
        if not self.valid:
            raise TruncationRiskError(f"{self.aborted} of {self.replicas} replicas hit the window edge")


def _strip(log: ObservationLog) -> ObservationLog:
    log.snapshots = None
    log.initial_snapshot = None
    return log


_INITS = {"standard": init_scenario, "truncation": init_truncation_pair}


def _run_block(spec, start, stop, reducer, init):
    out = []
    for r in range(start, stop):
        log = run(_INITS[init](spec, r), spec)
        rec = reducer(log) if reducer is not None else _strip(log)
        out.append((rec, bool(log.aborted), int(log.violations), int(log.n_events)))
    return out


def run_ensemble(spec: ScenarioSpec, replicas: int, reducer=None, workers: int = 1,
                 first_replica: int = 0, init: str = "standard") -> EnsembleResult:
    """Run replicas ``first_replica .. first_replica + replicas - 1`` of ``spec``.

    ``reducer`` maps an :class:`ObservationLog` to the record kept for that
    replica (it must be picklable when ``workers > 1``); the default keeps
    the log without snapshots.  ``init="truncation"`` starts every replica
    from :func:`init_truncation_pair`.
    """
    if replicas < 1:
        raise DomainError("replicas must be >= 1")
    if init not in _INITS:
        raise DomainError(f"unknown init {init!r}")
    stop = first_replica + replicas
    if workers <= 1 or replicas == 1:
        rows = _run_block(spec, first_replica, stop, reducer, init)
    else:
        edges = np.linspace(first_replica, stop, min(workers * 4, replicas) + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_block, spec, int(a), int(b), reducer, init)
                    for a, b in zip(edges[:-1], edges[1:]) if b > a]
            rows = [row for f in futs for row in f.result()]
    return EnsembleResult(
        spec=spec,
        first_replica=first_replica,
        records=[r[0] for r in rows],
        aborted=sum(r[1] for r in rows),
        violations=sum(r[2] for r in rows),
        n_events=sum(r[3] for r in rows),
    )


# ---------------------------------------------------------------------------
# estimators


def mean_stderr(x) -> tuple[float, float]:
    """Sample mean and its standard error (nan stderr for one sample)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        raise DomainError("no samples")
    m = float(x.mean())
    if n == 1:
        return m, math.nan
    return m, float(x.std(ddof=1) / math.sqrt(n))


def unbiased_variance(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise DomainError("variance needs at least two samples")
    return float(x.var(ddof=1))


def jackknife_variance(x) -> tuple[float, float]:
    """Unbiased sample variance and its delete-1 jackknife standard error."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 3:
        raise DomainError("the jackknife variance needs at least three samples")
    y = x - x.mean()
    s1, s2 = y.sum(), (y * y).sum()
    m_loo = (s1 - y) / (n - 1)
    v_loo = (s2 - y * y - (n - 1) * m_loo * m_loo) / (n - 2)
    se = math.sqrt((n - 1) / n * float(((v_loo - v_loo.mean()) ** 2).sum()))
    return float(y.var(ddof=1)), se


def _z(lhs, lhs_se, rhs, rhs_se) -> float:
    diff = lhs - rhs
    se = math.hypot(lhs_se, rhs_se)
    if se == 0.0 or math.isnan(se):
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff / se


@dataclass
class IdentityReport:
    name: str
    lhs_estimate: float
    lhs_stderr: float
    rhs_estimate: float
    rhs_stderr: float
    z_score: float
    passed: bool
    threshold: float = Z_THRESHOLD
    extra: dict = field(default_factory=dict)

    @classmethod
    def compare(cls, name, lhs, lhs_se, rhs, rhs_se=0.0, threshold=Z_THRESHOLD, **extra):
        z = _z(lhs, lhs_se, rhs, rhs_se)
        return cls(name, float(lhs), float(lhs_se), float(rhs), float(rhs_se), float(z),
                   bool(abs(z) < threshold), threshold, dict(extra))

    def as_dict(self) -> dict:
        d = {"name": self.name, "lhs": self.lhs_estimate, "lhs_stderr": self.lhs_stderr,
             "rhs": self.rhs_estimate, "rhs_stderr": self.rhs_stderr, "z": self.z_score,
             "pass": self.passed}
        d.update(self.extra)
        return d


@dataclass
class MomentSeries:
    """Entries ``(t, estimate, stderr, replicas)`` of a moment against time."""

    m: float
    entries: list = field(default_factory=list)

    def __post_init__(self):
        for t, est, se, n in self.entries:
            if est < 0:
                raise DomainError(f"negative moment estimate at t={t}")

    @property
    def times(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries], dtype=np.float64)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries], dtype=np.float64)

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=np.float64)


@dataclass
class ExponentFit:
    slope: float
    intercept: float
    slope_stderr: float
    t_range: tuple[float, float]

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "slope_stderr": self.slope_stderr, "t_min": self.t_range[0], "t_max": self.t_range[1]}


def fit_exponent(series: MomentSeries) -> ExponentFit:
    """Least squares of log(estimate) on log(t).

    The slope is a fixed linear combination of the log estimates; its
    standard error propagates the entry errors through d log y = dy / y,
    treating the entries as independent.
    """
    t, y, se = series.times, series.estimates, series.stderrs
    if np.unique(t).size < 4:
        raise DomainError("an exponent fit needs at least four distinct times")
    if (y <= 0).any() or (t <= 0).any():
        raise DomainError("log-log fit needs positive times and estimates")
    x, ly = np.log(t), np.log(y)
    xc = x - x.mean()
    w = xc / (xc * xc).sum()
    slope = float((w * ly).sum())
    intercept = float(ly.mean() - slope * x.mean())
    rel = np.nan_to_num(se / y)
    slope_se = float(math.sqrt(((w * rel) ** 2).sum()))
    return ExponentFit(slope, intercept, slope_se, (float(t.min()), float(t.max())))


# ---------------------------------------------------------------------------
# defect paths and currents shared between experiments


def _positive_grid(t_grid) -> tuple[float, ...]:
    grid = sorted({float(t) for t in t_grid})
    if any(t < 0 or not math.isfinite(t) for t in grid):
        raise DomainError("times must be finite and >= 0")
    return tuple(t for t in grid if t > 0)


def _defect_reducer(log):
    return log.defect("Q_a").copy()


def _current_reducer(log):
    return log.currents[:, 0, :].copy()


@lru_cache(maxsize=16)
def _defect_paths(rho, grid, replicas, seed, workers, margin_factor):
    """(R, len(grid)) antiparticle positions from one run per replica."""
    spec = ScenarioSpec.muhat_pair(rho, horizon=grid[-1], checkpoints=grid, seed=seed,
                                   margin_factor=margin_factor)
    res = run_ensemble(spec, replicas, _defect_reducer, workers)
    res.require_valid()
    return np.stack(res.records)


@lru_cache(maxsize=16)
def _stationary_currents(rho, grid, observers, replicas, seed, workers, margin_factor):
    """(R, len(grid), len(observers)) stationary currents."""
    spec = ScenarioSpec.stationary(rho, horizon=grid[-1], checkpoints=grid, observers=observers,
                                   seed=seed, margin_factor=margin_factor)
    res = run_ensemble(spec, replicas, _current_reducer, workers)
    res.require_valid()
    return np.stack(res.records)


def defect_positions(rho, t_grid, replicas, seed=0, workers=1, margin_factor=1.0) -> np.ndarray:
    """(R, T) antiparticle positions of MuHatPair replicas at the positive times of ``t_grid``.

    Results are memoised per argument set; replica ``r`` is the same
    whatever ``replicas`` is, so a prefix of a larger run is a smaller run.
    """
    grid = _positive_grid(t_grid)
    return _defect_paths(float(rho), grid, int(replicas), int(seed), int(workers), float(margin_factor))


def stationary_currents(rho, t_grid, observers, replicas, seed=0, workers=1, margin_factor=1.0) -> np.ndarray:
    """(R, T, V) stationary currents J^(V)(t), memoised like :func:`defect_positions`."""
    grid = _positive_grid(t_grid)
    return _stationary_currents(float(rho), grid, tuple(float(v) for v in observers), int(replicas),
                                int(seed), int(workers), float(margin_factor))


# seeds of paired runs are kept apart so the two sides are independent
MUHAT_SEED_OFFSET = 1_000_003


def moment_series(rho, m, t_grid, replicas, seed=0, workers=1, margin_factor=1.0) -> MomentSeries:
    """E|Q_a(t) - [V^rho t]|^m over ``t_grid`` from MuHatPair runs."""
    if not (1 <= m < 3):
        raise DomainError(f"moment order must lie in [1, 3), got {m}")
    grid = _positive_grid(t_grid)
    entries = []
    paths = (_defect_paths(float(rho), grid, int(replicas), int(seed), int(workers), float(margin_factor))
             if grid else None)
    V = characteristic_speed(rho)
    for t in sorted({float(t) for t in t_grid}):
        if t == 0:
            entries.append((0.0, 0.0, 0.0, int(replicas)))
            continue
        q = paths[:, grid.index(t)]
        dev = np.abs(q - int_toward_zero(V * t)).astype(np.float64) ** m
        est, se = mean_stderr(dev)
        entries.append((t, est, se, int(replicas)))
    return MomentSeries(float(m), entries)


def diffusivity_series(rho, t_grid, replicas, seed=0, workers=1,
                       margin_factor=1.0) -> tuple[MomentSeries, MomentSeries]:
    """Var(Q_a(t)) and D(t) = Var(Q_a(t)) / t, both with jackknife errors."""
    grid = _positive_grid(t_grid)
    if not grid:
        raise DomainError("diffusivity needs positive times")
    paths = _defect_paths(float(rho), grid, int(replicas), int(seed), int(workers), float(margin_factor))
    var_entries, d_entries = [], []
    for c, t in enumerate(grid):
        v, se = jackknife_variance(paths[:, c])
        var_entries.append((t, v, se, int(replicas)))
        d_entries.append((t, v / t, se / t, int(replicas)))
    return MomentSeries(2.0, var_entries), MomentSeries(2.0, d_entries)


def verify_identities(rho, V, t, replicas, seed=0, workers=1, margin_factor=1.0) -> list[IdentityReport]:
    """Check the exact finite-t identities at one time.

    For each observer speed: (a) the stationary current variance against
    rho(1+rho) E|[Vt] - Q_a(t)|, (b) the mean current against
    f t - rho [Vt].  Once: (c) the mean antiparticle position against
    V^rho t.  Stationary and MuHatPair sides use independent seeds.
    """
    if not t > 0:
        raise DomainError("verify_identities needs t > 0")
    speeds = (float(V),) if np.isscalar(V) else tuple(float(v) for v in V)
    grid = (float(t),)
    J = _stationary_currents(float(rho), grid, speeds, int(replicas), int(seed), int(workers),
                             float(margin_factor))[:, 0, :]
    Q = _defect_paths(float(rho), grid, int(replicas), int(seed) + MUHAT_SEED_OFFSET, int(workers),
                      float(margin_factor))[:, 0]
    chi = rho * (1.0 + rho)
    out = []
    for v, Vv in enumerate(speeds):
        b = int_toward_zero(Vv * t)
        var, var_se = jackknife_variance(J[:, v])
        dev, dev_se = mean_stderr(np.abs(b - Q))
        out.append(IdentityReport.compare(f"variance_identity[V={Vv:g}]", var, var_se, chi * dev,
                                          chi * dev_se, V=Vv, t=t))
        mj, mj_se = mean_stderr(J[:, v])
        out.append(IdentityReport.compare(f"mean_current[V={Vv:g}]", mj, mj_se,
                                          flux(rho) * t - rho * b, V=Vv, t=t))
    mq, mq_se = mean_stderr(Q)
    out.append(IdentityReport.compare("mean_defect", mq, mq_se, characteristic_speed(rho) * t, t=t))
    return out


# ---------------------------------------------------------------------------
# two-point function


@dataclass
class TwoPointReport:
    sites: np.ndarray
    lhs: np.ndarray
    lhs_stderr: np.ndarray
    rhs: np.ndarray
    rhs_stderr: np.ndarray
    site_reports: list
    sum_rule: IdentityReport
    first_moment_rule: IdentityReport
    interior: int = 0

    def reports_for(self, sites) -> list[IdentityReport]:
        want = set(int(i) for i in sites)
        return [r for i, r in zip(self.sites, self.site_reports) if int(i) in want]


class _TwoPointReducer:
    """Per-replica translation average of (w_{j+i}(t) - rho)(w_j(0) - rho).

    ``j`` runs over window indices ``j_lo .. j_hi - 1``; one row per config.
    """

    def __init__(self, rho, offsets, j_lo, j_hi, configs=(0,)):
        self.rho = rho
        self.offsets = offsets
        self.j_lo, self.j_hi = j_lo, j_hi
        self.configs = configs

    def __call__(self, log):
        rows = []
        for k in self.configs:
            w0 = log.initial_snapshot[k].astype(np.float64) - self.rho
            wt = log.snapshots[0, k].astype(np.float64) - self.rho
            a = w0[self.j_lo: self.j_hi]
            n = a.size
            rows.append([np.dot(a, wt[self.j_lo + i: self.j_lo + i + n]) / n for i in self.offsets])
        return np.array(rows)


def _interior(lo_index_safe, n_sites, i_min, i_max):
    j_lo = max(lo_index_safe - i_min, 0)
    j_hi = n_sites - max(i_max, 0)
    return j_lo, j_hi


def two_point_check(rho, t=20.0, site_range=None, samples=2000, seed=0, workers=1,
                    margin_factor=20.0, check_sites=None) -> TwoPointReport:
    """Stationary two-point function against rho(1+rho) P{Q_a(t) = i}.

    The left side averages over interior sites ``j`` of one long
    stationary window per replica; ``margin_factor`` sets how long.  Sites
    at distance less than ``t + 12 sqrt(t) + 50`` from the left edge, shifted
    by the offset range, are excluded.  The right side comes from
    independent MuHatPair runs.
    """
    if not t > 0:
        raise DomainError("two_point_check needs t > 0")
    reach = math.ceil(t + 12.0 * math.sqrt(t))
    if site_range is None:
        site_range = (-reach, reach)
    i_min, i_max = int(site_range[0]), int(site_range[1])
    if i_min > -reach or i_max < reach:
        raise DomainError(f"site range must cover [-{reach}, {reach}]")
    offsets = np.arange(i_min, i_max + 1)
    spec = ScenarioSpec.stationary(rho, horizon=float(t), checkpoints=(float(t),), seed=seed,
                                   margin_factor=margin_factor, snapshots=True)
    lo, hi = build_window(spec)
    safe = math.ceil(t + 12.0 * math.sqrt(t) + 50.0)
    j_lo, j_hi = _interior(safe, hi - lo + 1, i_min, i_max)
    if j_hi - j_lo < 1:
        raise DomainError("window too short for the requested offsets; raise margin_factor")
    res = run_ensemble(spec, samples, _TwoPointReducer(float(rho), offsets, j_lo, j_hi), workers)
    res.require_valid()
    S = np.stack(res.records)[:, 0]  # (R, sites)
    lhs = S.mean(0)
    lhs_se = S.std(0, ddof=1) / math.sqrt(S.shape[0]) if S.shape[0] > 1 else np.full(offsets.size, np.nan)
    Q = _defect_paths(float(rho), (float(t),), int(samples), int(seed) + MUHAT_SEED_OFFSET, int(workers),
                      1.0)[:, 0]
    chi = rho * (1.0 + rho)
    ind = (Q[:, None] == offsets[None, :]).astype(np.float64)
    rhs = chi * ind.mean(0)
    rhs_se = chi * ind.std(0, ddof=1) / math.sqrt(ind.shape[0]) if ind.shape[0] > 1 else np.zeros(offsets.size)
    chosen = offsets if check_sites is None else np.asarray(list(check_sites))
    reports = [IdentityReport.compare(f"two_point[i={i}]", lhs[i - i_min], lhs_se[i - i_min],
                                      rhs[i - i_min], rhs_se[i - i_min], i=int(i), t=t)
               for i in chosen]
    tot, tot_se = mean_stderr(S.sum(1))
    mom, mom_se = mean_stderr(S @ offsets.astype(np.float64))
    sum_rule = IdentityReport.compare("two_point_sum", tot, tot_se, chi, t=t)
    first = IdentityReport.compare("two_point_first_moment", mom, mom_se,
                                   chi * characteristic_speed(rho) * t, t=t)
    return TwoPointReport(np.asarray(chosen), lhs, lhs_se, rhs, rhs_se, reports, sum_rule, first,
                          interior=j_hi - j_lo)


# ---------------------------------------------------------------------------
# off-characteristic fluctuations


def ks_distance(x, continuity: bool = True) -> float:
    """Kolmogorov-Smirnov distance of standardised ``x`` from N(0, 1).

    Integer-valued data are compared on the half-integer grid when
    ``continuity`` is set: the empirical CDF at ``k`` is matched with the normal CDF at
    ``k + 1/2`` and the normal CDF at ``k - 1/2`` with the empirical CDF just
    below ``k``, which removes the lattice step from the statistic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise DomainError("KS distance needs at least two samples")
    mu, sd = x.mean(), x.std(ddof=1)
    if sd == 0:
        return 1.0
    if not continuity or not np.array_equal(x, np.round(x)):
        return float(stats.kstest((x - mu) / sd, "norm").statistic)
    vals, counts = np.unique(x, return_counts=True)
    ecdf_hi = np.cumsum(counts) / x.size
    ecdf_lo = ecdf_hi - counts / x.size
    upper = stats.norm.cdf((vals + 0.5 - mu) / sd)
    lower = stats.norm.cdf((vals - 0.5 - mu) / sd)
    return float(max(np.abs(ecdf_hi - upper).max(), np.abs(ecdf_lo - lower).max()))


@dataclass
class OffCharResult:
    V: float
    report: IdentityReport
    ks: float
    rel_err: float


def offchar_suite(rho, V, t, replicas, seed=0, workers=1, margin_factor=1.0, min_gap=0.2):
    """Var(J^(V)(t)) / t against rho(1+rho)|V^rho - V| plus a KS distance.

    ``V`` may be a sequence; all speeds are observed in the same runs and a
    list is returned.
    """
    speeds = (float(V),) if np.isscalar(V) else tuple(float(v) for v in V)
    Vr = characteristic_speed(rho)
    for v in speeds:
        if v == Vr:
            raise DomainError("V equals the characteristic speed; use the scaling experiments")
        if abs(v - Vr) < min_gap:
            raise DomainError(f"|V - V^rho| = {abs(v - Vr):g} is below {min_gap:g}")
    J = _stationary_currents(float(rho), (float(t),), speeds, int(replicas), int(seed), int(workers),
                             float(margin_factor))[:, 0, :]
    out = []
    for k, v in enumerate(speeds):
        var, se = jackknife_variance(J[:, k])
        target = rho * (1.0 + rho) * abs(Vr - v)
        rep = IdentityReport.compare(f"offchar_variance[V={v:g}]", var / t, se / t, target, V=v, t=t)
        rel = abs(var / t / target - 1.0) if target else math.inf
        out.append(OffCharResult(v, rep, ks_distance(J[:, k]), rel))
    return out if not np.isscalar(V) else out[0]


# ---------------------------------------------------------------------------
# pathwise lemma on the perturbed segment


@dataclass
class Lemma41Result:
    violations: int
    checked: int
    replicas: int
    aborted: int = 0


def _lemma_reducer(log):
    return int(log.defect("Q^(-n)")[0]), int(log.currents[0, 0, 0]), int(log.currents[0, 2, 0])


def _lemma_desync(spec, start, stop):
    out = []
    for r in range(start, stop):
        ens = init_scenario(spec, r)
        window = (ens.window_lo, ens.window_hi)
        eta_side = CoupledEnsemble(spec, window, ens.counts[0:1].copy(), ens.defects, None, ens.rng, r)
        zeta_rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed), spawn_key=(r, 1)))
        zeta_side = CoupledEnsemble(spec, window, ens.counts[2:3].copy(), [], None, zeta_rng, r)
        a, b = run(eta_side, spec), run(zeta_side, spec)
        out.append((int(a.defect("Q^(-n)")[0]), int(a.currents[0, 0, 0]), int(b.currents[0, 0, 0]),
                    bool(a.aborted)))
    return out


def lemma41_pathwise(rho, lam, u, V, t, replicas, seed=0, workers=1, desync=False) -> Lemma41Result:
    """Count replicas with Q^(-n)(t) <= [Vt] but J^(V,zeta)(t) > J^(V,eta)(t).

    With ``desync`` the zeta process is run on its own clock stream from
    the same initial state, which breaks the coupling the lemma relies on.
    """
    if t == 0:
        # Q^(-n)(0) = -n <= 0 and both currents vanish
        return Lemma41Result(0, int(replicas), int(replicas))
    spec = ScenarioSpec.segment(rho, lam, u, horizon=float(t), checkpoints=(float(t),),
                                observers=(float(V),), seed=seed)
    b = int_toward_zero(V * t)
    if desync:
        rows = _lemma_desync(spec, 0, int(replicas))
        aborted = sum(r[3] for r in rows)
    else:
        res = run_ensemble(spec, replicas, _lemma_reducer, workers)
        rows, aborted = res.records, res.aborted
    checked = bad = 0
    for q, j_eta, j_zeta, *_ in rows:
        if q <= b:
            checked += 1
            bad += j_zeta - j_eta > 0
    return Lemma41Result(int(bad), checked, int(replicas), int(aborted))


# ---------------------------------------------------------------------------
# TASEP


@dataclass
class TaggedResult:
    alpha: float
    variance: MomentSeries
    drift: list  # (t, mean R - (2 alpha - 1) t, stderr)


def tagged_particle_suite(alpha, t_grid, replicas, seed=0, workers=1, margin_factor=1.0) -> TaggedResult:
    """Variance and drift of the tagged TASEP particle R_[alpha^2 t](t).

    Uses rho = 1/alpha - 1 and R_k = -h_k + k, so the tagged position is
    [alpha^2 t] minus the stationary current seen at speed alpha^2.
    """
    if not (0 < alpha < 1):
        raise DomainError("alpha must lie in (0, 1)")
    rho = 1.0 / alpha - 1.0
    grid = _positive_grid(t_grid)
    if not grid:
        raise DomainError("tagged particle suite needs positive times")
    V = alpha * alpha
    J = _stationary_currents(float(rho), grid, (V,), int(replicas), int(seed), int(workers),
                             float(margin_factor))[:, :, 0]
    var_entries, drift = [], []
    for c, t in enumerate(grid):
        R = int_toward_zero(V * t) - J[:, c]
        v, se = jackknife_variance(R)
        var_entries.append((t, v, se, int(replicas)))
        m, mse = mean_stderr(R)
        drift.append((t, m - (2 * alpha - 1) * t, mse))
    return TaggedResult(float(alpha), MomentSeries(2.0, var_entries), drift)


def tasep_bijection_check(rho=1.0, n_particles=50, horizon=20.0, replicas=100, seed=0,
                          checkpoints=None) -> int:
    """Mismatches between a direct TASEP run and the mapped ZRP run.

    Both are driven by the same per-site Poisson clocks: the ring of ZRP
    site k is the ring of TASEP particle k.  Returns the number of
    (replica, checkpoint, particle) triples where R_k != -h_k + k.
    """
    from .engine import apply_ring, poisson_clock_rings

    if checkpoints is None:
        checkpoints = np.linspace(horizon / 10, horizon, 10)
    checkpoints = np.asarray(checkpoints, dtype=np.float64)
    lo = -(n_particles // 2)
    hi = lo + n_particles - 1
    spec = ScenarioSpec.stationary(rho, horizon=horizon)
    bad = 0
    for r in range(replicas):
        rng = replica_rng(seed, r)
        w = quantile_array(LawId.geometric(rho), rng.random(n_particles))
        ens = CoupledEnsemble(spec, (lo, hi), w[None, :], [], None, rng, r)
        tasep = tasep_from_zrp(Configuration(lo, hi, w))
        times, sites = poisson_clock_rings(n_particles, horizon, rng)
        c = 0
        for tr, x in zip(list(times) + [math.inf], list(sites) + [0]):
            while c < checkpoints.size and checkpoints[c] < tr:
                h = heights_now(ens, 0)
                for k in range(lo, hi + 1):
                    bad += tasep[k] != -h[k] + k
                c += 1
            if tr == math.inf:
                break
            site = int(x) + lo
            apply_ring(ens, site)
            tasep_step_direct(tasep, site)
    return int(bad)


# ---------------------------------------------------------------------------
# truncation audit


def _pair_reducer(log):
    return log.currents[0].copy(), log.defect_positions[0].copy()


def truncation_audit(spec: ScenarioSpec, replicas: int, workers: int = 1) -> dict:
    """Estimates at ``margin_factor`` and at twice it from one coupled run.

    Returns, per observable, the two estimates, the stderr and the shift
    in stderr units.  Observables: mean current and current variance at
    each observer (stationary) or mean and mean-absolute deviation of the
    antiparticle (muhat_pair).
    """
    res = run_ensemble(spec, replicas, _pair_reducer, workers, init="truncation")
    cur = np.stack([r[0] for r in res.records])  # (R, K=2, V)
    out = {}

    def add(name, narrow, wide, se):
        out[name] = {"narrow": narrow, "wide": wide, "stderr": se,
                     "shift_in_stderr": abs(wide - narrow) / se if se > 0 else (0.0 if wide == narrow else math.inf)}

    t = spec.checkpoints[0]
    if spec.kind == "stationary":
        for v, V in enumerate(spec.observers):
            m0, se = mean_stderr(cur[:, 0, v])
            m1, _ = mean_stderr(cur[:, 1, v])
            add(f"mean_current[V={V:g}]", m0, m1, se)
            v0, vse = jackknife_variance(cur[:, 0, v])
            v1, _ = jackknife_variance(cur[:, 1, v])
            add(f"current_variance[V={V:g}]", v0, v1, vse)
    else:
        pos = np.stack([r[1] for r in res.records])  # (R, D)
        b = int_toward_zero(characteristic_speed(spec.rho) * t)
        for name, fn in (("mean_defect", lambda q: q), ("defect_abs_dev", lambda q: np.abs(q - b))):
            m0, se = mean_stderr(fn(pos[:, 0]))
            m1, _ = mean_stderr(fn(pos[:, 1]))
            add(name, m0, m1, se)
    out["_aborted"] = res.aborted
    return out


def two_point_truncation_audit(rho, t=20.0, samples=2000, seed=0, workers=1,
                               margin_factor=20.0) -> dict:
    """Two-point sum rules at ``margin_factor`` and twice it from one coupled run."""
    reach = math.ceil(t + 12.0 * math.sqrt(t))
    offsets = np.arange(-reach, reach + 1)
    spec = ScenarioSpec.stationary(rho, horizon=float(t), checkpoints=(float(t),), seed=seed,
                                   margin_factor=margin_factor, snapshots=True)
    lo, hi = build_window(spec)
    wide_lo, _ = build_window(spec.with_(margin_factor=2 * margin_factor))
    safe = math.ceil(t + 12.0 * math.sqrt(t) + 50.0)
    j_lo, j_hi = _interior(safe, hi - lo + 1, -reach, reach)
    shift = lo - wide_lo
    red = _TwoPointReducer(float(rho), offsets, j_lo + shift, j_hi + shift, configs=(0, 1))
    res = run_ensemble(spec, samples, red, workers, init="truncation")
    S = np.stack(res.records)  # (R, 2, sites)
    out = {}
    for name, w in (("two_point_sum", np.ones(offsets.size)),
                    ("two_point_first_moment", offsets.astype(np.float64))):
        m0, se = mean_stderr(S[:, 0] @ w)
        m1, _ = mean_stderr(S[:, 1] @ w)
        out[name] = {"narrow": m0, "wide": m1, "stderr": se,
                     "shift_in_stderr": abs(m1 - m0) / se if se > 0 else (0.0 if m1 == m0 else math.inf)}
    out["_aborted"] = res.aborted
    return out
