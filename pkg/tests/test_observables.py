import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zrplab.engine import ScenarioSpec, init_scenario, run
from zrplab.errors import DomainError, InvariantViolation
from zrplab.observables import (
    HeightLedger,
    characteristic_speed,
    count_interval_defects,
    current_at,
    flux,
    gaps_from_positions,
    heights_now,
    initial_height,
    initial_heights,
    int_toward_zero,
    model_constants,
    tasep_from_zrp,
    tasep_step_direct,
    tasep_view,
)
from zrplab.state import Configuration


@pytest.mark.parametrize("x,expected", [(2.5, 2), (-2.5, -2), (0.0, 0), (-0.3, 0), (7.0, 7), (-7.0, -7)])
def test_int_toward_zero(x, expected):
    assert int_toward_zero(x) == expected


def test_int_toward_zero_rejects_nonfinite():
    with pytest.raises(DomainError):
        int_toward_zero(math.inf)


def test_initial_height_examples():
    # sites -2..3 holding 1, 2, 3, 1, 1, 4
    c = Configuration(-2, 3, [1, 2, 3, 1, 1, 4])
    assert initial_height(c, 0) == 0
    assert initial_height(c, 1) == -1
    assert initial_height(c, 3) == -6
    assert initial_height(c, -1) == 3
    assert initial_height(c, -2) == 5
    assert list(initial_heights(c)) == [initial_height(c, i) for i in range(-2, 4)]


@given(st.lists(st.integers(0, 5), min_size=1, max_size=20), st.integers(0, 19))
def test_heights_step_down_by_occupation(w, k):
    lo = -min(k, len(w) - 1)
    c = Configuration(lo, lo + len(w) - 1, w)
    h = HeightLedger.initial(c)
    assert h[0] == 0
    assert list(h.occupations()) == w[1:]


def test_model_constants_at_unit_density():
    assert model_constants(1.0) == (0.5, 0.25, 2.0)
    assert model_constants(0.0) == (0.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        model_constants(-0.1)


@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0, 3.0])
def test_characteristic_speed_is_flux_derivative(rho):
    eps = 1e-6
    fd = (flux(rho + eps) - flux(rho - eps)) / (2 * eps)
    assert fd == pytest.approx(characteristic_speed(rho), rel=1e-8)


def test_count_interval_defects():
    eta = Configuration(-1, 5, [0, 1, 0, 2, 0, 0, 1])
    om = Configuration(-1, 5, [1, 1, 2, 2, 1, 3, 1])
    # j=0, u=2 covers sites 1..3
    assert count_interval_defects(eta, om, 0, 2) == 2 + 0 + 1
    assert count_interval_defects(eta, om, 0, 1) == 2
    with pytest.raises(DomainError):
        count_interval_defects(eta, om, 3, 2)
    with pytest.raises(DomainError):
        count_interval_defects(om, eta, 0, 1)
    with pytest.raises(DomainError):
        count_interval_defects(eta, om, 0, 0)


def test_current_matches_run_log():
    spec = ScenarioSpec.stationary(1.0, horizon=20.0, checkpoints=(20.0,), observers=(0.0, 0.5), seed=2)
    ens = init_scenario(spec)
    log = run(ens)
    assert current_at(ens, 0, 0.0, 20.0).J == log.currents[0, 0, 0]
    assert current_at(ens, 0, 0.5, 20.0).J == log.currents[0, 0, 1]
    h = heights_now(ens, 0)
    assert np.array_equal(h.occupations(), ens.counts[0][1:])
    with pytest.raises(DomainError):
        current_at(ens, 0, 1e6, 20.0)


def test_tasep_positions_of_empty_zrp():
    c = Configuration.zeros(-3, 3)
    s = tasep_from_zrp(c)
    for k in range(-3, 4):
        assert s[k] == k
        assert tasep_view(HeightLedger.initial(c), k) == k


@given(st.lists(st.integers(0, 4), min_size=2, max_size=15), st.integers(0, 14))
def test_tasep_gaps_are_occupations(w, k):
    lo = -min(k, len(w) - 1)
    c = Configuration(lo, lo + len(w) - 1, w)
    s = tasep_from_zrp(c)
    assert s[0] == 0
    assert list(gaps_from_positions(s.positions)[:-1]) == w
    h = HeightLedger.initial(c)
    for i in range(c.window_lo, c.window_hi + 1):
        assert tasep_view(h, i) == s[i]


def test_tasep_exclusion():
    s = tasep_from_zrp(Configuration(0, 2, [0, 2, 0]))
    assert list(s.positions) == [-1, 0, 3, 4, 5]
    tasep_step_direct(s, 2)  # blocked by particle 1
    assert s[2] == 4
    tasep_step_direct(s, 0)  # blocked by the frozen wall
    assert s[0] == 0
    tasep_step_direct(s, 1)
    tasep_step_direct(s, 2)
    assert (s[1], s[2]) == (2, 3)
    frozen = s[-1]
    tasep_step_direct(s, -1)
    assert s[-1] == frozen


def test_tasep_rejects_unordered_positions():
    from zrplab.observables import TasepState
    with pytest.raises(InvariantViolation):
        TasepState(0, [0, 0, 1], range(0, 3))
