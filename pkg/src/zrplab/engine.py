"""Event-driven simulation of coupled TAZRP configurations.

All configurations of an ensemble read the same Poisson clocks (basic
coupling).  A ring at a site where the largest configuration is empty, and
no defect sits, changes nothing, so only the *active* sites are raced:
the next ring comes after an Exponential(n_active) time at a uniformly
chosen active site.

The lattice is a finite window.  Cutting on the right is exact because a
site's jump rate never reads sites to its right; particles leaving
``window_hi`` are collected in a sink.  Cutting on the left is not exact,
so the window carries a margin that grows like ``T + 12 sqrt(T)``.

Replica streams: ``SeedSequence(seed, spawn_key=(replica_index,))`` feeds
one generator per replica.  Initialisation consumes exactly one uniform per
window site (shared by all coupled laws at that site); every later draw
belongs to the event race.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import defects as _defects
from .defects import LabelRegistry, SingleDefect, spawn_labels
from .errors import ConfigurationError, DomainError, InvariantViolation, ResourceError
from .measures import LawId, quantile_array
from .observables import characteristic_speed, initial_heights, int_toward_zero
from .state import Configuration

__all__ = [
    "ScenarioSpec",
    "CoupledEnsemble",
    "ObservationLog",
    "build_window",
    "segment_offset",
    "replica_rng",
    "init_scenario",
    "init_truncation_pair",
    "next_ring",
    "apply_ring",
    "run",
    "run_with_clocks",
    "poisson_clock_rings",
]

KINDS = ("stationary", "muhat_pair", "three_process", "segment")

DEFAULT_MAX_SITES = 4_000_000


@dataclass(frozen=True)
class ScenarioSpec:
    """Initial-measure recipe plus the observation schedule.

    ``kind`` is one of ``stationary``, ``muhat_pair``, ``three_process``,
    ``segment``.  ``lam`` is used by the last two, ``u`` only by ``segment``.
    """

    kind: str
    rho: float
    lam: float | None = None
    u: int | None = None
    horizon: float = 0.0
    checkpoints: tuple[float, ...] = ()
    observers: tuple[float, ...] = ()
    seed: int = 0
    margin_factor: float = 1.0
    max_sites: int = DEFAULT_MAX_SITES
    snapshots: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise ConfigurationError(f"rho must be finite and >= 0, got {self.rho}")
        if self.kind in ("three_process", "segment"):
            if self.lam is None:
                raise ConfigurationError(f"{self.kind} needs lam")
            if self.lam < 0:
                raise ConfigurationError("lam must be >= 0")
            if self.lam > self.rho:
                raise ConfigurationError(f"lam={self.lam} exceeds rho={self.rho}")
        if self.kind == "segment":
            if self.u is None or int(self.u) != self.u or self.u < 1:
                raise ConfigurationError("segment needs a positive integer u")
        if not (self.horizon >= 0 and math.isfinite(self.horizon)):
            raise ConfigurationError("horizon must be finite and >= 0")
        if self.margin_factor < 1:
            raise ConfigurationError("margin_factor must be >= 1")
        cps = tuple(float(t) for t in self.checkpoints)
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ConfigurationError("checkpoints must be strictly increasing")
        if cps and (cps[0] <= 0 or cps[-1] > self.horizon):
            raise ConfigurationError("checkpoints must lie in (0, horizon]")
        object.__setattr__(self, "checkpoints", cps)
        object.__setattr__(self, "observers", tuple(float(v) for v in self.observers))

    @classmethod
    def stationary(cls, rho, **kw):
        return cls("stationary", rho, **kw)

    @classmethod
    def muhat_pair(cls, rho, **kw):
        return cls("muhat_pair", rho, **kw)

    @classmethod
    def three_process(cls, rho, lam, **kw):
        return cls("three_process", rho, lam=lam, **kw)

    @classmethod
    def segment(cls, rho, lam, u, **kw):
        return cls("segment", rho, lam=lam, u=u, **kw)

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)

    @property
    def n_configs(self) -> int:
        return {"stationary": 1, "muhat_pair": 2}.get(self.kind, 3)


def segment_offset(rho: float, lam: float, u: int, t: float) -> int:
    """n = [V^lam t] - [V^rho t] + u."""
    return (int_toward_zero(characteristic_speed(lam) * t)
            - int_toward_zero(characteristic_speed(rho) * t) + int(u))


def build_window(spec: ScenarioSpec) -> tuple[int, int]:
    T = spec.horizon
    half = math.ceil(T + spec.margin_factor * (12.0 * math.sqrt(T) + 50.0))
    shift = segment_offset(spec.rho, spec.lam, spec.u, T) if spec.kind == "segment" else 0
    lo, hi = -half - shift, half
    if hi - lo + 1 > spec.max_sites:
        raise ResourceError(f"window of {hi - lo + 1} sites exceeds the cap of {spec.max_sites}")
    return lo, hi


def replica_rng(seed: int, replica_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(replica_index),)))


# ---------------------------------------------------------------------------
# jitted core


@njit(cache=True, inline='always')
def _is_active(counts, dpos, x):
    if counts[counts.shape[0] - 1, x] > 0:
        return True
    for d in range(dpos.shape[0]):
        if dpos[d] == x:
            return True
    return False


@njit(cache=True, inline='always')
def _refresh(counts, dpos, act_list, act_pos, n_act, x):
    """Bring site ``x`` in or out of the active list; returns the new size."""
    if x >= act_pos.shape[0]:
        return n_act
    on = _is_active(counts, dpos, x)
    p = act_pos[x]
    if on and p < 0:
        act_list[n_act] = x
        act_pos[x] = n_act
        return n_act + 1
    if not on and p >= 0:
        last = act_list[n_act - 1]
        act_list[p] = last
        act_pos[last] = p
        act_pos[x] = -1
        return n_act - 1
    return n_act


@njit(cache=True, inline='always')
def _apply(x, counts, sink, bonds, dpos, dlower, use_reg, reg_lo, reg_hi,
           stacks, heights, label_site, jumped, audit):
    """Ring at window index ``x``; returns a registry status code."""
    K, L = counts.shape
    for k in range(K):
        if counts[k, x] > 0:
            jumped[k] = True
            counts[k, x] -= 1
            if x + 1 < L:
                counts[k, x + 1] += 1
            else:
                sink[k] += 1
            bonds[k, x] += 1
        else:
            jumped[k] = False
    for d in range(dpos.shape[0]):
        if dpos[d] == x and not jumped[dlower[d]]:
            dpos[d] = x + 1
    status = 0
    if use_reg and jumped[reg_hi] and not jumped[reg_lo]:
        status = _defects.registry_jump(stacks, heights, label_site, x)
    for k in range(K - 1):
        if counts[k, x] > counts[k + 1, x]:
            audit[0] += 1
        if x + 1 < L and counts[k, x + 1] > counts[k + 1, x + 1]:
            audit[0] += 1
    return status


@njit(cache=True, inline='always')
def _draw(rng, n_act):
    dt = rng.standard_exponential() / n_act
    return dt


@njit(cache=True)
def _record(c, counts, bonds, h0, dpos, obs_idx, use_reg, label_site, zero_off,
            heights, reg_lo, reg_hi, rank_anchor, snap_cfg,
            out_J, out_dpos, out_label0, out_rank0, out_snap, audit):
    K, L = counts.shape
    for v in range(obs_idx.shape[1]):
        i = obs_idx[c, v]
        for k in range(K):
            out_J[c, k, v] = h0[k, i] + bonds[k, i]
    for d in range(dpos.shape[0]):
        out_dpos[c, d] = dpos[d]
    if use_reg:
        out_label0[c] = label_site[zero_off]
        audit[1] += _defects.count_label_disorder(label_site)
        for x in range(L):
            if counts[reg_hi, x] - counts[reg_lo, x] != heights[x]:
                audit[2] += 1
    if rank_anchor >= 0:
        cum = 0
        pos = L
        for x in range(L):
            cum += counts[reg_hi, x] - counts[reg_lo, x]
            if cum > rank_anchor:
                pos = x
                break
        out_rank0[c] = pos
    if snap_cfg:
        for k in range(K):
            for x in range(L):
                out_snap[c, k, x] = counts[k, x]


@njit(cache=True, inline='always')
def _advance(rng, state_f, state_i, t_stop, counts, sink, bonds, dpos, dlower,
             act_list, act_pos, use_reg, reg_lo, reg_hi, stacks, heights, label_site,
             jumped, audit):
    """Apply events up to ``t_stop``; state_f = [now, pending event time]."""
    now = state_f[0]
    t_next = state_f[1]
    n_act = state_i[0]
    n_ev = state_i[1]
    status = 0
    while t_next <= t_stop:
        now = t_next
        x = act_list[int(rng.random() * n_act)]
        status = _apply(x, counts, sink, bonds, dpos, dlower, use_reg, reg_lo, reg_hi,
                        stacks, heights, label_site, jumped, audit)
        n_ev += 1
        n_act = _refresh(counts, dpos, act_list, act_pos, n_act, x)
        n_act = _refresh(counts, dpos, act_list, act_pos, n_act, x + 1)
        if status != 0:
            break
        if n_act == 0:
            t_next = np.inf
        else:
            t_next = now + _draw(rng, n_act)
    state_f[0] = now
    state_f[1] = t_next
    state_i[0] = n_act
    state_i[1] = n_ev
    return status


# A runtime registry flag inside the hot loop roughly doubles the cost per
# event, so the loop is compiled twice with the flag as a constant.
@njit(cache=True)
def _advance_plain(rng, state_f, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                   act_list, act_pos, reg_lo, reg_hi, stacks, heights, label_site,
                   jumped, audit):
    return _advance(rng, state_f, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                    act_list, act_pos, False, reg_lo, reg_hi, stacks, heights, label_site,
                    jumped, audit)


@njit(cache=True)
def _advance_reg(rng, state_f, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                 act_list, act_pos, reg_lo, reg_hi, stacks, heights, label_site,
                 jumped, audit):
    return _advance(rng, state_f, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                    act_list, act_pos, True, reg_lo, reg_hi, stacks, heights, label_site,
                    jumped, audit)


@njit(cache=True)
def _simulate(rng, state_f, state_i, horizon, checkpoints,
              counts, sink, bonds, h0, dpos, dlower, act_list, act_pos,
              use_reg, reg_lo, reg_hi, stacks, heights, label_site, zero_off,
              rank_anchor, snap_cfg, obs_idx,
              out_J, out_dpos, out_label0, out_rank0, out_snap, audit):
    """Advance to ``horizon``; state_f = [now], state_i = [n_active, n_events].

    Draw order matches :func:`_next_ring`: an exponential waiting time,
    then (if the event is not past the horizon) a uniform site pick.
    """
    jumped = np.zeros(counts.shape[0], dtype=np.bool_)
    st = np.empty(2)
    st[0] = state_f[0]
    st[1] = np.inf if state_i[0] == 0 else st[0] + _draw(rng, state_i[0])
    status = 0
    for c in range(checkpoints.shape[0] + 1):
        # events strictly before a checkpoint count; one exactly on it does too
        t_stop = checkpoints[c] if c < checkpoints.shape[0] else horizon
        if use_reg:
            status = _advance_reg(rng, st, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                                  act_list, act_pos, reg_lo, reg_hi, stacks, heights,
                                  label_site, jumped, audit)
        else:
            status = _advance_plain(rng, st, state_i, t_stop, counts, sink, bonds, dpos, dlower,
                                    act_list, act_pos, reg_lo, reg_hi, stacks, heights,
                                    label_site, jumped, audit)
        if status != 0:
            break
        if c < checkpoints.shape[0]:
            _record(c, counts, bonds, h0, dpos, obs_idx, use_reg, label_site, zero_off,
                    heights, reg_lo, reg_hi, rank_anchor, snap_cfg,
                    out_J, out_dpos, out_label0, out_rank0, out_snap, audit)
    state_f[0] = st[0] if status != 0 else horizon
    return status


@njit(cache=True)
def _next_ring(rng, act_list, n_act):
    if n_act == 0:
        return np.inf, -1
    dt = _draw(rng, n_act)
    x = act_list[int(rng.random() * n_act)]
    return dt, x


@njit(cache=True)
def _step(x, counts, sink, bonds, dpos, dlower, act_list, act_pos, n_act,
          use_reg, reg_lo, reg_hi, stacks, heights, label_site, audit):
    jumped = np.zeros(counts.shape[0], dtype=np.bool_)
    status = _apply(x, counts, sink, bonds, dpos, dlower, use_reg, reg_lo, reg_hi,
                    stacks, heights, label_site, jumped, audit)
    n_act = _refresh(counts, dpos, act_list, act_pos, n_act, x)
    n_act = _refresh(counts, dpos, act_list, act_pos, n_act, x + 1)
    return status, n_act


# ---------------------------------------------------------------------------
# ensemble


_EMPTY_STACKS = np.zeros((1, 1), dtype=np.int64)
_EMPTY_I64 = np.zeros(1, dtype=np.int64)


class CoupledEnsemble:
    """Ordered configurations driven by one clock stream.

    ``counts[k]`` are occupation numbers on the window (ascending in ``k``),
    ``bonds[k, x]`` counts jumps across bond ``x -> x+1`` of configuration
    ``k`` since time 0 and ``h0[k]`` holds its initial heights.
    """

    def __init__(self, spec: ScenarioSpec, window: tuple[int, int], counts: np.ndarray,
                 defects: list[SingleDefect], registry: LabelRegistry | None,
                 rng: np.random.Generator, replica_index: int = 0):
        self.spec = spec
        self.window_lo, self.window_hi = window
        self.counts = np.ascontiguousarray(counts, dtype=np.int64)
        K, L = self.counts.shape
        if L != self.window_hi - self.window_lo + 1:
            raise DomainError("counts do not match the window")
        if K < 1 or K > 3:
            raise ConfigurationError("an ensemble holds 1 to 3 configurations")
        if (self.counts[:-1] > self.counts[1:]).any():
            raise ConfigurationError("configurations are not pointwise ordered")
        self.replica_index = replica_index
        self.sink = np.zeros(K, dtype=np.int64)
        self.bonds = np.zeros((K, L), dtype=np.int64)
        self.h0 = np.stack([initial_heights(self.config(k)) for k in range(K)])
        self.initial_counts = self.counts.copy()
        self.defect_ids = [d.id for d in defects]
        self.defect_upper = [d.upper_config for d in defects]
        self.dpos = np.array([d.position - self.window_lo for d in defects], dtype=np.int64)
        self.dlower = np.array([d.lower_config for d in defects], dtype=np.int64)
        self.initial_dpos = self.dpos.copy()
        self.registry = registry
        self.initial_label_zero = self.label_zero_site()
        self.rng = rng
        self.now = 0.0
        self.n_events = 0
        self.audit = np.zeros(3, dtype=np.int64)
        self.act_pos = np.full(L, -1, dtype=np.int64)
        self.act_list = np.zeros(L, dtype=np.int64)
        active = self.counts[-1] > 0
        for p in self.dpos:
            if 0 <= p < L:
                active[p] = True
        idx = np.flatnonzero(active)
        self.act_list[: idx.size] = idx
        self.act_pos[idx] = np.arange(idx.size)
        self.n_active = int(idx.size)

    # -- views -------------------------------------------------------------

    @property
    def n_configs(self) -> int:
        return self.counts.shape[0]

    @property
    def n_sites(self) -> int:
        return self.counts.shape[1]

    def config(self, k: int) -> Configuration:
        """Configuration ``k`` sharing storage with the ensemble."""
        conf = Configuration.__new__(Configuration)
        conf.window_lo, conf.window_hi = self.window_lo, self.window_hi
        conf.counts = self.counts[k]
        conf.sink_count = int(self.sink[k]) if hasattr(self, "sink") else 0
        return conf

    @property
    def configs(self) -> list[Configuration]:
        return [self.config(k) for k in range(self.n_configs)]

    @property
    def defects(self) -> list[SingleDefect]:
        return [SingleDefect(i, int(lo), up, int(p) + self.window_lo)
                for i, lo, up, p in zip(self.defect_ids, self.dlower, self.defect_upper, self.dpos)]

    def defect_position(self, defect_id: str) -> int:
        return int(self.dpos[self.defect_ids.index(defect_id)]) + self.window_lo

    def label_zero_site(self) -> int | None:
        if self.registry is None:
            return None
        return self.registry.site_of(0)

    def is_active(self, site: int) -> bool:
        return bool(self.act_pos[site - self.window_lo] >= 0)

    def _reg_args(self):
        reg = self.registry
        if reg is None:
            return False, 0, 0, _EMPTY_STACKS, _EMPTY_I64, _EMPTY_I64
        return True, reg.lower_config, reg.upper_config, reg.stacks, reg.heights, reg.label_site

    def snapshot(self) -> dict:
        return {
            "now": self.now,
            "counts": self.counts.copy(),
            "sink": self.sink.copy(),
            "bonds": self.bonds.copy(),
            "defects": self.dpos.copy(),
            "labels": None if self.registry is None else self.registry.label_site.copy(),
        }

    def _check_audit(self):
        if self.audit[0]:
            raise InvariantViolation(f"pointwise order broken {self.audit[0]} time(s)")


# ---------------------------------------------------------------------------
# scenario initialisation


def _origin_shift(spec):
    return segment_offset(spec.rho, spec.lam, spec.u, spec.horizon) if spec.kind == "segment" else 0


def init_scenario(spec: ScenarioSpec, replica_index: int = 0,
                  rng: np.random.Generator | None = None) -> CoupledEnsemble:
    lo, hi = build_window(spec)
    L = hi - lo + 1
    if rng is None:
        rng = replica_rng(spec.seed, replica_index)
    u = rng.random(L)
    origin = -lo
    rho = spec.rho
    defects: list[SingleDefect] = []
    registry = None
    if spec.kind == "stationary":
        counts = quantile_array(LawId.geometric(rho), u)[None, :]
    elif spec.kind == "muhat_pair":
        lower = quantile_array(LawId.geometric(rho), u)
        lower[origin] = quantile_array(LawId.muhat(rho), u[origin : origin + 1])[0]
        upper = lower.copy()
        upper[origin] += 1
        counts = np.stack([lower, upper])
        defects.append(SingleDefect("Q_a", 0, 1, 0))
    elif spec.kind == "three_process":
        lam = spec.lam
        eta = quantile_array(LawId.geometric(lam), u)
        om = quantile_array(LawId.geometric(rho), u)
        eta[origin] = quantile_array(LawId.muhat(lam), u[origin : origin + 1])[0]
        om[origin] = quantile_array(LawId.muhat(rho), u[origin : origin + 1])[0]
        top = om.copy()
        top[origin] += 1
        counts = np.stack([eta, om, top])
        defects.append(SingleDefect("Q_a", 1, 2, 0))
        defects.append(SingleDefect("Q^lambda", 0, None, 0))
        registry = spawn_labels(Configuration(lo, hi, eta), Configuration(lo, hi, top), "X", anchor=0)
        registry.lower_config, registry.upper_config = 0, 2
    else:
        lam = spec.lam
        n = _origin_shift(spec)
        xs = -n - lo
        eta = quantile_array(LawId.geometric(lam), u)
        zeta = quantile_array(LawId.geometric(rho), u)
        eta[xs] = quantile_array(LawId.muhat(lam), u[xs : xs + 1])[0]
        zeta[xs] = quantile_array(LawId.muhat(rho), u[xs : xs + 1])[0]
        zeta[xs + 1 : origin + 1] = eta[xs + 1 : origin + 1]
        xi = eta.copy()
        xi[: xs + 1] = zeta[: xs + 1]
        counts = np.stack([eta, xi, zeta])
        defects.append(SingleDefect("Q^(-n)", 0, None, -n))
        registry = spawn_labels(Configuration(lo, hi, eta), Configuration(lo, hi, xi), "Y", anchor=-n)
        registry.lower_config, registry.upper_config = 0, 1
    if (counts[:-1] > counts[1:]).any():
        raise InvariantViolation("initial coupling is not ordered")
    return CoupledEnsemble(spec, (lo, hi), counts, defects, registry, rng, replica_index)


def init_truncation_pair(spec: ScenarioSpec, replica_index: int = 0,
                         rng: np.random.Generator | None = None) -> CoupledEnsemble:
    """Exact coupling of the ``spec`` window with a doubled-margin window.

    The doubled-margin scenario is initialised as usual.  Next to it runs a
    copy that is empty outside the ``spec`` window.  Under shared clocks that
    copy never receives particles from the left and, by total asymmetry, its
    sites up to the ``spec`` window's right edge evolve exactly as the
    process truncated to that window.  Configuration 0 is the truncated
    copy and configuration 1 the wide one.  For ``muhat_pair`` only the lower
    configurations are kept and the two antiparticles, ``Q_a|narrow`` and
    ``Q_a``, run as implied defects on them.
    """
    if spec.kind not in ("stationary", "muhat_pair"):
        raise ConfigurationError("the truncation pair covers stationary and muhat_pair scenarios")
    wide = init_scenario(spec.with_(margin_factor=2 * spec.margin_factor), replica_index, rng)
    lo, hi = build_window(spec)
    keep = np.zeros(wide.n_sites, dtype=bool)
    keep[lo - wide.window_lo: hi - wide.window_lo + 1] = True
    full = wide.initial_counts[0]
    narrow = np.where(keep, full, 0)
    defects = []
    if spec.kind == "muhat_pair":
        defects = [SingleDefect("Q_a|narrow", 0, None, 0), SingleDefect("Q_a", 1, None, 0)]
    counts = np.stack([narrow, full])
    return CoupledEnsemble(wide.spec, (wide.window_lo, wide.window_hi), counts, defects, None,
                           wide.rng, replica_index)


# ---------------------------------------------------------------------------
# stepping


def next_ring(ens: CoupledEnsemble) -> tuple[float, int | None]:
    """Draw the next effective ring; ``(inf, None)`` if nothing can move."""
    dt, x = _next_ring(ens.rng, ens.act_list, ens.n_active)
    if x < 0:
        return math.inf, None
    ens.now += dt
    return ens.now, int(x) + ens.window_lo


def apply_ring(ens: CoupledEnsemble, site: int) -> CoupledEnsemble:
    """Apply one clock ring at ``site`` to every configuration and defect."""
    x = site - ens.window_lo
    if not (0 <= x < ens.n_sites):
        raise DomainError(f"site {site} outside the window")
    use_reg, rlo, rhi, stacks, heights, label_site = ens._reg_args()
    status, n_act = _step(x, ens.counts, ens.sink, ens.bonds, ens.dpos, ens.dlower,
                          ens.act_list, ens.act_pos, ens.n_active,
                          use_reg, rlo, rhi, stacks, heights, label_site, ens.audit)
    ens.n_active = int(n_act)
    ens.n_events += 1
    if status:
        raise InvariantViolation(_defects._STATUS_TEXT[status])
    ens._check_audit()
    return ens


# ---------------------------------------------------------------------------
# runs


@dataclass
class ObservationLog:
    """What a run records at its checkpoints.

    ``currents[c, k, v]`` is J^(V_v)(t_c) of configuration ``k``;
    ``defect_positions[c, d]`` uses ``window_hi + 1`` for the sink.
    """

    times: np.ndarray
    observers: tuple[float, ...]
    defect_ids: list[str]
    initial_defects: np.ndarray
    currents: np.ndarray
    defect_positions: np.ndarray
    label_zero: np.ndarray | None
    label_zero_rank: np.ndarray | None
    initial_label_zero: int | None
    snapshots: np.ndarray | None
    initial_snapshot: np.ndarray | None
    order_violations: int = 0
    label_violations: int = 0
    registry_mismatches: int = 0
    n_events: int = 0
    aborted: bool = False
    abort_reason: str = ""
    extra: dict = field(default_factory=dict)

    def defect(self, defect_id: str) -> np.ndarray:
        return self.defect_positions[:, self.defect_ids.index(defect_id)]

    def current(self, config: int, observer: int = 0) -> np.ndarray:
        return self.currents[:, config, observer]

    @property
    def violations(self) -> int:
        return self.order_violations + self.label_violations + self.registry_mismatches


def _observer_bonds(ens: CoupledEnsemble, times, observers) -> np.ndarray:
    idx = np.zeros((len(times), len(observers)), dtype=np.int64)
    for c, t in enumerate(times):
        for v, V in enumerate(observers):
            b = int_toward_zero(V * t)
            if not (ens.window_lo <= b <= ens.window_hi):
                raise DomainError(f"observer bond {b} (V={V}, t={t}) outside the window")
            idx[c, v] = b - ens.window_lo
    return idx


def run(ens: CoupledEnsemble, spec: ScenarioSpec | None = None) -> ObservationLog:
    """Advance ``ens`` to the horizon, recording at each checkpoint.

    Observables at a checkpoint are read from the state after the last
    event at or before it.  A replica whose tracked defect (or label 0)
    ends within ``10 * margin_factor`` sites of ``window_hi`` is flagged
    as aborted.
    """
    spec = spec or ens.spec
    times = np.asarray(spec.checkpoints, dtype=np.float64)
    obs_idx = _observer_bonds(ens, times, spec.observers)
    C, K, L, D = times.size, ens.n_configs, ens.n_sites, ens.dpos.size
    out_J = np.zeros((C, K, obs_idx.shape[1]), dtype=np.int64)
    out_dpos = np.zeros((C, D), dtype=np.int64)
    use_reg, rlo, rhi, stacks, heights, label_site = ens._reg_args()
    out_label0 = np.zeros(C, dtype=np.int64)
    out_rank0 = np.zeros(C, dtype=np.int64)
    zero_off = -ens.registry.min_label if use_reg else 0
    rank_anchor = zero_off if use_reg else -1
    snap_cfg = bool(spec.snapshots)
    out_snap = np.zeros((C, K, L) if snap_cfg else (1, 1, 1), dtype=np.int64)
    initial_snapshot = ens.counts.copy() if snap_cfg else None
    state_f = np.array([ens.now])
    state_i = np.array([ens.n_active, ens.n_events], dtype=np.int64)
    status = _simulate(ens.rng, state_f, state_i, float(spec.horizon), times,
                       ens.counts, ens.sink, ens.bonds, ens.h0, ens.dpos, ens.dlower,
                       ens.act_list, ens.act_pos,
                       use_reg, rlo, rhi, stacks, heights, label_site, zero_off,
                       rank_anchor, snap_cfg, obs_idx,
                       out_J, out_dpos, out_label0, out_rank0, out_snap, ens.audit)
    if status:
        raise InvariantViolation(_defects._STATUS_TEXT[status])
    ens.now = float(state_f[0])
    ens.n_active = int(state_i[0])
    ens.n_events = int(state_i[1])
    lo = ens.window_lo
    log = ObservationLog(
        times=times,
        observers=tuple(spec.observers),
        defect_ids=list(ens.defect_ids),
        initial_defects=ens.initial_dpos + lo,
        currents=out_J,
        defect_positions=out_dpos + lo,
        label_zero=out_label0 + lo if use_reg else None,
        label_zero_rank=out_rank0 + lo if use_reg else None,
        initial_label_zero=ens.initial_label_zero,
        snapshots=out_snap if snap_cfg else None,
        initial_snapshot=initial_snapshot,
        order_violations=int(ens.audit[0]),
        label_violations=int(ens.audit[1]),
        registry_mismatches=int(ens.audit[2]),
        n_events=ens.n_events,
    )
    guard = ens.window_hi - 10 * spec.margin_factor
    tracked = list(ens.dpos + lo)
    if use_reg:
        tracked.append(ens.label_zero_site())
    if any(p >= guard for p in tracked):
        log.aborted = True
        log.abort_reason = f"defect within {10 * spec.margin_factor:g} sites of window_hi={ens.window_hi}"
    return log


def poisson_clock_rings(n_sites: int, horizon: float, rng: np.random.Generator):
    """Independent rate-1 Poisson ring times for each site, merged in time order.

    Returns ``(times, site_indices)``.
    """
    times, sites = [], []
    for x in range(n_sites):
        k = rng.poisson(horizon)
        times.append(np.sort(rng.uniform(0.0, horizon, size=k)))
        sites.append(np.full(k, x, dtype=np.int64))
    times = np.concatenate(times) if times else np.zeros(0)
    sites = np.concatenate(sites) if sites else np.zeros(0, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    return times[order], sites[order]


def run_with_clocks(ens: CoupledEnsemble, ring_times, ring_sites, thinning: bool = True) -> list[dict]:
    """Drive ``ens`` with explicit per-site clock rings (window indices).

    With ``thinning`` rings at inactive sites are skipped.  Returns the
    trajectory as the snapshot after every ring that was applied and
    changed something.
    """
    traj = []
    for t, x in zip(ring_times, ring_sites):
        site = int(x) + ens.window_lo
        if thinning and not ens.is_active(site):
            continue
        before = ens.counts.copy(), ens.dpos.copy()
        ens.now = float(t)
        apply_ring(ens, site)
        if not (np.array_equal(before[0], ens.counts) and np.array_equal(before[1], ens.dpos)):
            snap = ens.snapshot()
            snap.pop("now")
            snap["time"] = float(t)
            traj.append(snap)
    return traj
