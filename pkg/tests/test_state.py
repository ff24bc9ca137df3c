import numpy as np
import pytest

from zrplab.errors import DomainError
from zrplab.state import Configuration


def test_zeros_and_from_sites():
    c = Configuration.from_sites(-2, 3, {-1: 2, 3: 1})
    assert list(c.counts) == [0, 2, 0, 0, 0, 1]
    assert c[-1] == 2 and c[0] == 0 and c.total == 3
    assert c.n_sites == 6 and list(c.sites) == [-2, -1, 0, 1, 2, 3]


def test_sink_counts_toward_total():
    c = Configuration(0, 2, [1, 0, 1], sink_count=4)
    assert c.total == 6


@pytest.mark.parametrize("args", [
    (0, 2, [1, 0]),
    (3, 2, []),
    (0, 1, [1, -1]),
])
def test_invalid_configurations(args):
    with pytest.raises(DomainError):
        Configuration(*args)


def test_index_and_setitem_guard_the_window():
    c = Configuration.zeros(-1, 1)
    with pytest.raises(DomainError):
        c[2]
    with pytest.raises(DomainError):
        c[0] = -1
    c[1] = 5
    assert c.counts[2] == 5


def test_copy_is_independent():
    c = Configuration(0, 2, [1, 2, 3])
    d = c.copy()
    d[0] = 9
    assert c[0] == 1


def test_pointwise_order():
    a = Configuration(0, 2, [0, 1, 1])
    b = Configuration(0, 2, [0, 2, 1])
    assert a <= b and not b <= a
    with pytest.raises(DomainError):
        a <= Configuration(1, 3, [0, 0, 0])


def test_counts_are_int64():
    c = Configuration(0, 1, np.array([1.0, 2.0]))
    assert c.counts.dtype == np.int64
