import numpy as np
import pytest

from zrplab.defects import LabelRegistry, SingleDefect, defect_step, ordering_audit, spawn_labels
from zrplab.engine import ScenarioSpec, init_scenario, run
from zrplab.errors import ConfigurationError, InvariantViolation
from zrplab.state import Configuration


def _pair(diff, lo=-2):
    lower = Configuration(lo, lo + len(diff) - 1, np.zeros(len(diff)))
    upper = Configuration(lo, lo + len(diff) - 1, diff)
    return lower, upper


@pytest.mark.parametrize("pos,site,lj,uj,expected", [
    (3, 3, False, True, 4),
    (3, 3, True, True, 3),
    (3, 2, False, True, 3),
    (3, 3, False, False, 3),
])
def test_defect_step(pos, site, lj, uj, expected):
    assert defect_step(pos, site, lj, uj) == expected


def test_spawn_x_labels():
    # discrepancies: one at -1, two at 0, one at 2
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "X", anchor=0)
    assert reg.site_stacks == {-1: [-2], 0: [-1, 0], 2: [1]}
    assert reg.site_of(0) == 0 and reg.n_labels == 4


def test_spawn_y_labels():
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "Y", anchor=2)
    assert reg.site_stacks == {-1: [-3], 0: [-2, -1], 2: [0]}
    with pytest.raises(ConfigurationError):
        spawn_labels(*_pair([0, 1, 2, 0, 1]), "Y", anchor=1)


def test_spawn_empty_registry():
    reg = spawn_labels(*_pair([0, 0, 0]), "Y", anchor=0)
    assert reg.n_labels == 0 and reg.site_stacks == {}


def test_spawn_errors():
    with pytest.raises(ConfigurationError):
        spawn_labels(*_pair([1, 0, 1]), "X", anchor=-1)
    lower, upper = _pair([1, 0, 1])
    with pytest.raises(ConfigurationError):
        spawn_labels(upper, Configuration(-2, 0, [0, 0, 0]))


def test_registry_jump_keeps_labels_ordered():
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "X", anchor=0)
    reg.on_config_jump(0, lower_jumped=False, upper_jumped=True)
    assert reg.site_stacks == {-1: [-2], 0: [-1], 1: [0], 2: [1]}
    reg.on_config_jump(0, lower_jumped=False, upper_jumped=True)
    assert reg.site_stacks == {-1: [-2], 1: [-1, 0], 2: [1]}
    reg.on_config_jump(1, lower_jumped=True, upper_jumped=True)  # both moved: no change
    assert reg.site_of(0) == 1
    reg.on_config_jump(2, lower_jumped=False, upper_jumped=True)  # off the right edge
    assert reg.in_sink == 1 and reg.site_of(1) == reg.sink_site


def test_registry_jump_from_empty_site():
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "X", anchor=0)
    with pytest.raises(InvariantViolation):
        reg.on_config_jump(1, lower_jumped=False, upper_jumped=True)


def test_registry_detects_order_break():
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "X", anchor=0)
    reg.stacks[4, 0] = -5 - reg.min_label  # pretend a lower label waits at site 2
    reg.on_config_jump(0, False, True)
    with pytest.raises(InvariantViolation):
        reg.on_config_jump(1, False, True)


def test_registry_copy_is_independent():
    reg = spawn_labels(*_pair([0, 1, 2, 0, 1]), "X", anchor=0)
    other = reg.copy()
    reg.on_config_jump(0, False, True)
    assert other.site_of(0) == 0


@pytest.mark.parametrize("kind,kw", [("three_process", {"lam": 0.5}), ("segment", {"lam": 0.8, "u": 3}),
                                     ("muhat_pair", {})])
def test_audit_clean_after_runs(kind, kw):
    spec = ScenarioSpec(kind, 1.0, horizon=30.0, checkpoints=(10.0, 30.0), seed=6, **kw)
    for r in range(5):
        ens = init_scenario(spec, r)
        assert ordering_audit(ens) == []
        log = run(ens)
        assert ordering_audit(ens) == []
        assert log.violations == 0
        if log.label_zero is not None:
            assert np.array_equal(log.label_zero, log.label_zero_rank)


def test_audit_negative_controls():
    ens = init_scenario(ScenarioSpec.three_process(1.0, 0.5, horizon=5.0, seed=1))
    x = int(np.flatnonzero(ens.counts[1])[0])
    ens.counts[0, x] = ens.counts[1, x] + 1
    msgs = ordering_audit(ens)
    assert any("above" in m for m in msgs)
    assert any("registry" in m for m in msgs)

    ens = init_scenario(ScenarioSpec.muhat_pair(1.0, horizon=5.0, seed=1))
    ens.dpos[0] += 1
    assert any("single discrepancy" in m for m in ordering_audit(ens))

    ens = init_scenario(ScenarioSpec.three_process(1.0, 0.5, horizon=5.0, seed=1))
    ens.dpos[ens.defect_ids.index("Q^lambda")] -= 3
    assert any("Q^lambda" in m for m in ordering_audit(ens))


def test_single_defect_record():
    d = SingleDefect("Q", 0, None, 4)
    assert d.upper_config is None and d.position == 4
    assert isinstance(LabelRegistry, type)
