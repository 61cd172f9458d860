import math

import pytest
from hypothesis import given, strategies as st

from resilient_ws.stats import checkpoint_model, ci_overlap, geo_mean, mean_ci


def test_mean_ci_constant():
    assert mean_ci([10, 10, 10, 10]) == (10.0, 0.0)


def test_mean_ci_hand_computed():
    # t(0.975, 2) = 4.302653; s = 1; n = 3
    mean, hw = mean_ci([9, 10, 11])
    assert mean == 10.0
    assert hw == pytest.approx(4.302653 / math.sqrt(3), abs=1e-5)
    assert hw == pytest.approx(2.484, abs=1e-3)


def test_mean_ci_single_sample_undefined():
    assert mean_ci([3.0]) == (3.0, None)


def test_mean_ci_deterministic():
    xs = [1.3, 2.7, 2.2, 0.9, 1.1]
    assert mean_ci(xs) == mean_ci(list(xs))


def test_mean_ci_rejects_empty_and_bad_level():
    with pytest.raises(ValueError):
        mean_ci([])
    with pytest.raises(ValueError):
        mean_ci([1, 2], level=1.0)


def test_geo_mean_examples():
    assert geo_mean([1, 1, 1]) == 1.0
    assert geo_mean([2, 0.5]) == pytest.approx(1.0)
    assert geo_mean([0.97, 0.97, 0.98, 0.90]) == pytest.approx(0.954, abs=5e-4)


@pytest.mark.parametrize("bad", [[1, 0], [1, -2], [], [float("nan")]])
def test_geo_mean_rejects(bad):
    with pytest.raises(ValueError):
        geo_mean(bad)


@given(st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=1, max_size=20))
def test_geo_mean_between_min_and_max(xs):
    g = geo_mean(xs)
    assert min(xs) * (1 - 1e-9) <= g <= max(xs) * (1 + 1e-9)


@pytest.mark.parametrize("n,expected", [(0, 1), (1, 1.5), (10, 6), (100, 51), (1000, 501)])
def test_checkpoint_model(n, expected):
    assert checkpoint_model(n) == expected


def test_checkpoint_model_rejects_negative():
    with pytest.raises(ValueError):
        checkpoint_model(-1)


def test_ci_overlap():
    assert ci_overlap((1.0, 0.5), (1.8, 0.4))
    assert not ci_overlap((1.0, 0.1), (2.0, 0.1))
    assert ci_overlap((1.0, None), (9.0, 0.1))
