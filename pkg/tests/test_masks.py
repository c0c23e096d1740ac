import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdlab.masks import (
    MAX_ENUM_BITS,
    BitBudgetError,
    DropScheme,
    MaskError,
    MaskSet,
    SitePlan,
    enumerate_all,
    enumerate_all_naive,
    enumerate_bits,
    expected_mask,
    make_rng,
    sample,
)

rates = st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.65, 0.9])


def test_rate_bounds():
    with pytest.raises(MaskError):
        DropScheme(1.0)
    with pytest.raises(MaskError):
        DropScheme(-0.1)
    with pytest.raises(MaskError):
        DropScheme(0.5, "per_token")


def test_keep_value_half():
    assert DropScheme(0.5).keep_value == 2.0


def test_sample_values_are_zero_or_keep():
    m = sample(DropScheme(0.5), (200,), make_rng(1)).data
    assert set(np.unique(m)) <= {0.0, 2.0}


def test_rate_zero_is_all_ones():
    np.testing.assert_array_equal(sample(DropScheme(0.0), (3, 4), make_rng(0)).data, np.ones((3, 4)))


def test_same_seed_same_mask():
    a = sample(DropScheme(0.3), (50,), make_rng((7, 1))).data
    b = sample(DropScheme(0.3), (50,), make_rng((7, 1))).data
    np.testing.assert_array_equal(a, b)


def test_expected_mask_is_ones():
    np.testing.assert_array_equal(expected_mask(DropScheme(0.4), (2, 3)).data, np.ones((2, 3)))


def test_sample_mean_close_to_one():
    m = sample(DropScheme(0.4), (200_000,), make_rng(3)).data
    # std of one entry is sqrt(p/(1-p)); 5 sigma on the mean
    assert abs(m.mean() - 1.0) < 5 * math.sqrt(0.4 / 0.6 / m.size)


def test_enumeration_example():
    vals, probs = enumerate_bits([0.5, 0.5])
    assert len(vals) == 4
    np.testing.assert_allclose(probs, 0.25)
    np.testing.assert_array_equal(vals[0], [2.0, 2.0])
    np.testing.assert_array_equal(vals[-1], [0.0, 0.0])


def test_enumeration_budget():
    with pytest.raises(BitBudgetError):
        enumerate_bits([0.5] * (MAX_ENUM_BITS + 1))
    with pytest.raises(BitBudgetError):
        enumerate_all(DropScheme(0.5), (3, 7))


@settings(max_examples=30, deadline=None)
@given(st.lists(rates, min_size=0, max_size=10))
def test_enumeration_probabilities_and_expectation(rs):
    vals, probs = enumerate_bits(rs)
    assert math.isclose(probs.sum(), 1.0, rel_tol=0, abs_tol=1e-12)
    # inverted scaling: the probability-weighted mask is all-ones
    np.testing.assert_allclose(probs @ vals, np.ones(len(rs)), rtol=0, atol=1e-12)
    assert len({tuple(v) for v in vals}) == len(vals) or any(r == 0 for r in rs)


@settings(max_examples=20, deadline=None)
@given(rates, st.integers(0, 8))
def test_enumeration_matches_naive(rate, k):
    vals, probs = enumerate_bits([rate] * k)
    naive = enumerate_all_naive(rate, k)
    assert len(naive) == len(vals)
    for (bits, p), v, q in zip(naive, vals, probs):
        np.testing.assert_array_equal(np.array(bits, dtype=float).reshape(-1), v)
        assert math.isclose(p, q, rel_tol=1e-12, abs_tol=1e-300)


def test_maskset_granularities():
    plan = {
        ("input", 0): SitePlan(DropScheme(0.5, "per_step"), (2, 3)),
        ("output", 0): SitePlan(DropScheme(0.5, "per_sequence"), (2, 3)),
        ("weight", 0): SitePlan(DropScheme(0.5, "weight_matrix"), (3, 12)),
        ("embedding", 0): SitePlan(DropScheme(0.1, "embedding_row"), (7,)),
    }
    ms = MaskSet.sample(plan, 4, seed=(1, 2))
    assert len(ms.masks[("input", 0)]) == 4
    assert ms.at("output", 0, 0) is ms.at("output", 0, 3)
    assert ms.at("weight", 0, 2).shape == (3, 12)
    assert ms.equals(MaskSet.sample(plan, 4, seed=(1, 2)))
    assert not ms.equals(MaskSet.sample(plan, 4, seed=(1, 3)))
    with pytest.raises(MaskError):
        ms.at("hidden", 0, 0)


def test_maskset_ones():
    plan = {("input", 0): SitePlan(DropScheme(0.5, "per_step"), (2, 3))}
    ms = MaskSet.ones(plan, 5)
    np.testing.assert_array_equal(ms.at("input", 0, 4).data, np.ones((2, 3)))
