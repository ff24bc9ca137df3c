"""Second class particles: single defects and the labelled family.

A single defect sits between a lower configuration and that configuration
plus one particle at the defect's site.  Because the upper configuration
has at least one particle there, the defect moves to the right exactly when
its site rings while the lower configuration is empty at that site.

The labelled family records the discrepancies ``upper - lower`` between
two ordered configurations.  Labels increase from left to right; a
discrepancy leaving a site is always the highest label there and it
arrives at the bottom of the next site's stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigurationError, InvariantViolation
from .state import Configuration, _same_window

__all__ = [
    "SingleDefect",
    "LabelRegistry",
    "spawn_labels",
    "defect_step",
    "ordering_audit",
]

# status codes returned by the jitted registry hook
OK = 0
EMPTY_STACK = 1
STACK_OVERFLOW = 2
ORDER_BROKEN = 3

_STATUS_TEXT = {
    EMPTY_STACK: "discrepancy jump requested at a site with no registered label",
    STACK_OVERFLOW: "label stack capacity exceeded",
    ORDER_BROKEN: "moving label is not below the labels at the destination",
}

DEFAULT_STACK_CAPACITY = 64


@dataclass
class SingleDefect:
    """Position of a lone discrepancy between ``lower_config`` and its +1 copy.

    ``upper_config`` is the index of an explicitly simulated upper
    configuration, or ``None`` when the upper process is only implied.
    """

    id: str
    lower_config: int
    upper_config: int | None
    position: int


def defect_step(position: int, site: int, lower_jumped: bool, upper_jumped: bool = True) -> int:
    """New position of a single defect after a ring at ``site``."""
    if position != site:
        return position
    if upper_jumped and not lower_jumped:
        return site + 1
    return position


@njit(cache=True)
def registry_jump(stacks, heights, label_site, x):
    """Move the top label of window index ``x`` to the bottom of ``x + 1``.

    Stacks hold label offsets in ascending order, bottom first.  Index
    ``len(heights)`` stands for the sink past the right edge.
    """
    n = heights.shape[0]
    h = heights[x]
    if h == 0:
        return EMPTY_STACK
    mover = stacks[x, h - 1]
    heights[x] = h - 1
    if x + 1 >= n:
        label_site[mover] = n
        return OK
    h2 = heights[x + 1]
    if h2 >= stacks.shape[1]:
        return STACK_OVERFLOW
    if h2 > 0 and stacks[x + 1, 0] <= mover:
        return ORDER_BROKEN
    for j in range(h2, 0, -1):
        stacks[x + 1, j] = stacks[x + 1, j - 1]
    stacks[x + 1, 0] = mover
    heights[x + 1] = h2 + 1
    label_site[mover] = x + 1
    return OK


@njit(cache=True)
def count_label_disorder(label_site):
    bad = 0
    for m in range(1, label_site.shape[0]):
        if label_site[m] < label_site[m - 1]:
            bad += 1
    return bad


class LabelRegistry:
    """Labelled ``upper - lower`` discrepancies on a lattice window.

    Internally labels are stored as offsets ``label - min_label`` so the
    arrays can be shared with the jitted event loop.
    """

    def __init__(self, window_lo, n_sites, min_label, label_site, stacks, heights,
                 lower_config=0, upper_config=1, style="X"):
        self.window_lo = int(window_lo)
        self.n_sites = int(n_sites)
        self.min_label = int(min_label)
        self.label_site = label_site
        self.stacks = stacks
        self.heights = heights
        self.lower_config = lower_config
        self.upper_config = upper_config
        self.style = style

    @property
    def n_labels(self) -> int:
        return int(self.label_site.shape[0])

    @property
    def sink_site(self) -> int:
        return self.window_lo + self.n_sites

    @property
    def label_to_site(self) -> dict[int, int]:
        return {self.min_label + m: self.window_lo + int(x) for m, x in enumerate(self.label_site)}

    @property
    def site_stacks(self) -> dict[int, list[int]]:
        out = {}
        for x in np.flatnonzero(self.heights):
            out[self.window_lo + int(x)] = [self.min_label + int(v) for v in self.stacks[x, : self.heights[x]]]
        return out

    def site_of(self, label: int) -> int:
        return self.window_lo + int(self.label_site[label - self.min_label])

    @property
    def in_sink(self) -> int:
        return int((self.label_site == self.n_sites).sum())

    def on_config_jump(self, site: int, lower_jumped: bool, upper_jumped: bool):
        if upper_jumped and not lower_jumped:
            status = registry_jump(self.stacks, self.heights, self.label_site, site - self.window_lo)
            if status != OK:
                raise InvariantViolation(f"{_STATUS_TEXT[status]} (site {site})")

    def discrepancy_counts(self) -> np.ndarray:
        return self.heights.copy()

    def copy(self) -> "LabelRegistry":
        return LabelRegistry(self.window_lo, self.n_sites, self.min_label, self.label_site.copy(),
                             self.stacks.copy(), self.heights.copy(), self.lower_config,
                             self.upper_config, self.style)


def spawn_labels(lower: Configuration, upper: Configuration, origin_rule: str = "X",
                 anchor: int = 0, capacity: int = DEFAULT_STACK_CAPACITY) -> LabelRegistry:
    """Label the ``upper - lower`` discrepancies.

    Slots are enumerated by site, then by depth within the site stack, and
    numbered consecutively.  With ``origin_rule="X"`` the topmost slot at
    ``anchor`` gets label 0 (an anchor without discrepancies is an error).
    With ``origin_rule="Y"`` the topmost slot overall gets label 0 and every
    slot must sit at or left of ``anchor``.
    """
    _same_window(lower, upper)
    diff = upper.counts - lower.counts
    if (diff < 0).any():
        bad = lower.window_lo + int(np.flatnonzero(diff < 0)[0])
        raise ConfigurationError(f"configurations are not ordered (site {bad})")
    n_sites = diff.shape[0]
    total = int(diff.sum())
    cum = np.cumsum(diff)
    if origin_rule == "X":
        x0 = anchor - lower.window_lo
        if not (0 <= x0 < n_sites) or diff[x0] == 0:
            raise ConfigurationError(f"no discrepancy at the anchor site {anchor}")
        zero_rank = int(cum[x0]) - 1
    elif origin_rule == "Y":
        if total and (diff[anchor - lower.window_lo + 1:] > 0).any():
            raise ConfigurationError(f"discrepancies to the right of the anchor site {anchor}")
        zero_rank = total - 1
    else:
        raise ValueError(f"unknown origin rule {origin_rule!r}")
    capacity = max(capacity, int(diff.max(initial=0)) + 16)
    stacks = np.zeros((n_sites, capacity), dtype=np.int64)
    heights = diff.astype(np.int64).copy()
    label_site = np.repeat(np.arange(n_sites, dtype=np.int64), diff)
    start = cum - diff
    for x in np.flatnonzero(diff):
        stacks[x, : diff[x]] = np.arange(start[x], cum[x])
    return LabelRegistry(lower.window_lo, n_sites, -zero_rank, label_site, stacks, heights,
                         style=origin_rule)


def ordering_audit(ensemble) -> list[str]:
    """All coupling-order violations visible in the ensemble's current state.

    Checks pointwise ordering of the configurations, label order, label
    conservation, agreement of the registry with the configurations, the
    single-defect representation, and the defect orderings
    ``Q_a <= X_0``, ``Q^lambda >= Q_a`` and ``Y_0 <= Q^(-n)``.
    """
    out = []
    counts = ensemble.counts
    for k in range(counts.shape[0] - 1):
        bad = np.flatnonzero(counts[k] > counts[k + 1])
        for x in bad:
            out.append(f"config {k} above config {k + 1} at site {ensemble.window_lo + int(x)}")
    for d in ensemble.defects:
        if d.upper_config is None:
            continue
        diff = counts[d.upper_config] - counts[d.lower_config]
        expect = np.zeros_like(diff)
        if d.position <= ensemble.window_hi:
            expect[d.position - ensemble.window_lo] = 1
        if not np.array_equal(diff, expect):
            out.append(f"defect {d.id} is not the single discrepancy of its pair")
    reg = ensemble.registry
    if reg is not None:
        dis = count_label_disorder(reg.label_site)
        if dis:
            out.append(f"label order broken at {dis} place(s)")
        in_window = int(reg.heights.sum())
        if in_window + reg.in_sink != reg.n_labels:
            out.append("label count not conserved")
        diff = counts[reg.upper_config] - counts[reg.lower_config]
        if not np.array_equal(diff, reg.heights):
            out.append("registry disagrees with configuration discrepancies")
    pos = {d.id: d.position for d in ensemble.defects}
    x0 = ensemble.label_zero_site()
    if x0 is not None:
        if "Q_a" in pos and pos["Q_a"] > x0:
            out.append(f"Q_a={pos['Q_a']} passed X_0={x0}")
        if "Q^(-n)" in pos and x0 > pos["Q^(-n)"]:
            out.append(f"Y_0={x0} passed Q^(-n)={pos['Q^(-n)']}")
    if "Q^lambda" in pos and "Q_a" in pos and pos["Q^lambda"] < pos["Q_a"]:
        out.append(f"Q^lambda={pos['Q^lambda']} behind Q_a={pos['Q_a']}")
    return out
