import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strsparse.experiments import magnitude_prune_to_budget
from strsparse.pruning import keep_count, magnitude_mask

weights = arrays(np.float64, st.integers(1, 60), elements=st.floats(-100, 100, allow_nan=False))
pct = st.floats(0, 100)


def test_tie_break_keeps_lowest_index():
    np.testing.assert_array_equal(magnitude_prune_to_budget(np.array([3.0, -1.0, 2.0, -2.0]), 50.0),
                                  [3.0, 0.0, 2.0, 0.0])


def test_extremes():
    W = np.array([[1.0, -2.0], [0.5, 4.0]])
    np.testing.assert_array_equal(magnitude_prune_to_budget(W, 0.0), W)
    np.testing.assert_array_equal(magnitude_prune_to_budget(W, 100.0), np.zeros_like(W))


def test_keep_count_rounds_half_up():
    assert keep_count(10, 25.0) == 8      # 7.5 -> 8
    assert keep_count(4, 50.0) == 2
    assert keep_count(3, 50.0) == 2       # 1.5 -> 2


def test_rejects_out_of_range():
    with pytest.raises(ValueError):
        magnitude_mask(np.ones(3), 101.0)


@given(weights, pct)
def test_exact_keep_count(W, s):
    assert int(magnitude_mask(W, s).sum()) == keep_count(W.size, s)


@given(weights, pct)
def test_kept_entries_dominate_pruned(W, s):
    m = magnitude_mask(W, s)
    if m.any() and (~m).any():
        assert np.abs(W[m]).min() >= np.abs(W[~m]).max()


distinct = st.integers(1, 60).flatmap(lambda n: st.permutations(list(range(1, n + 1))))


@given(distinct, st.lists(st.booleans(), min_size=60, max_size=60), pct, st.floats(1e-3, 1e3))
def test_scale_invariance(perm, signs, s, c):
    # distinct magnitudes so positive scaling cannot create ties
    W = np.array(perm, dtype=float) * np.where(signs[:len(perm)], 1.0, -1.0)
    np.testing.assert_array_equal(magnitude_mask(W, s), magnitude_mask(c * W, s))
