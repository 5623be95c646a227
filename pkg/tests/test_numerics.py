import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hesscore.numerics import (
    DimensionError,
    SeededRng,
    deterministic_sum,
    largest_remainder,
    rademacher,
    symmetric,
)


def test_rademacher_entries_are_signs():
    z = rademacher(SeededRng(0), 4)
    assert z.shape == (4,)
    assert set(np.unique(z)) <= {-1.0, 1.0}


def test_rademacher_is_deterministic():
    assert np.array_equal(rademacher(SeededRng(0), 4), rademacher(SeededRng(0), 4))


def test_rademacher_frozen_sequence():
    # Philox output is platform independent; a change here means the stream changed
    assert rademacher(SeededRng(0), 8).tolist() == [1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0]
    assert SeededRng(0).normal(size=3).tolist() == [-0.2059740286292238, -0.12884495093462758, -0.28978987549091256]


def test_rademacher_mean_near_zero():
    Z = rademacher(SeededRng(1), 5, size=100_000)
    # stderr of a sign mean over 1e5 draws is 0.0032, so 0.02 is over 6 sigma
    assert np.all(np.abs(Z.mean(axis=0)) < 0.02)


def test_rademacher_rejects_zero_dim():
    with pytest.raises(DimensionError):
        rademacher(SeededRng(0), 0)


def test_spawned_streams_differ_and_reproduce():
    a1, b1 = SeededRng(3).spawn(2)
    a2, _ = SeededRng(3).spawn(2)
    x, y = a1.normal(size=5), b1.normal(size=5)
    assert not np.array_equal(x, y)
    assert np.array_equal(x, a2.normal(size=5))


def test_deterministic_sum_examples():
    assert deterministic_sum([np.array([1.0, 2.0]), np.array([3.0, 4.0])]).tolist() == [4.0, 6.0]
    assert deterministic_sum([], dim=2).tolist() == [0.0, 0.0]


def test_deterministic_sum_repeatable():
    xs = list(np.random.default_rng(0).normal(size=(50, 7)))
    assert np.array_equal(deterministic_sum(xs), deterministic_sum(xs))
    np.testing.assert_allclose(deterministic_sum(xs[::-1]), deterministic_sum(xs), rtol=1e-13)


def test_deterministic_sum_length_mismatch():
    with pytest.raises(DimensionError):
        deterministic_sum([np.zeros(2), np.zeros(3)])
    with pytest.raises(DimensionError):
        deterministic_sum([])


def test_symmetric_rejects_asymmetric():
    with pytest.raises(ValueError):
        symmetric([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(DimensionError):
        symmetric([[1.0, 2.0]])


def test_largest_remainder_examples():
    assert largest_remainder(100, (0.9, 0.1)).tolist() == [90, 10]
    assert largest_remainder(10, (0.33, 0.33, 0.34)).tolist() == [3, 3, 4]
    assert largest_remainder(3, (1, 1)).tolist() == [2, 1]  # tie goes to the lower index


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0.01, 10.0), min_size=1, max_size=8))
def test_largest_remainder_sums_and_stays_close(total, fractions):
    counts = largest_remainder(total, fractions)
    assert counts.sum() == total
    exact = total * np.asarray(fractions) / np.sum(fractions)
    assert np.all(np.abs(counts - exact) < 1.0 + 1e-9)
