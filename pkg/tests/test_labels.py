from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slsr.labels import LabelTarget, all_in_one, lsr, lsro, one_hot, pseudo_label, slsr_target


def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot(2, 4).probs, [0, 0, 1, 0])
    np.testing.assert_array_equal(one_hot(0, 1).probs, [1])
    with pytest.raises(ValueError):
        one_hot(4, 4)


def test_lsr_examples():
    np.testing.assert_array_equal(lsr(1, 5, 0.0).probs, one_hot(1, 5).probs)
    np.testing.assert_allclose(lsr(0, 4, 0.1).probs, [0.925, 0.025, 0.025, 0.025], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(lsr(3, 7, 1.0).probs, lsro(7).probs)
    with pytest.raises(ValueError):
        lsr(0, 4, 1.5)


def test_lsr_raw_form_keeps_printed_mass():
    t = lsr(0, 4, 0.1, normalized=False)
    assert t.probs[0] == pytest.approx(0.9)
    assert t.probs.sum() == pytest.approx(1 - 0.1 + 3 * 0.025 - 0.0)


def test_lsro_examples():
    assert lsro(751).weight == Fraction(1, 751)
    assert lsro(751).probs[0] == pytest.approx(0.00133, abs=5e-6)
    np.testing.assert_array_equal(lsro(1).probs, [1.0])
    assert lsro(5).provenance == "generated"


def test_pseudo_label_examples():
    assert np.flatnonzero(pseudo_label([0.2, 0.5, 0.3]).probs).tolist() == [1]
    assert np.flatnonzero(pseudo_label([0.25] * 4).probs).tolist() == [0]
    with pytest.raises(ValueError):
        pseudo_label([])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), st.floats(0.01, 100.0))
def test_pseudo_label_scale_invariant(scores, c):
    a = pseudo_label(scores).probs
    b = pseudo_label(np.asarray(scores) * c).probs
    np.testing.assert_array_equal(a, b)


def test_all_in_one_examples():
    t = all_in_one(751)
    assert t.probs.shape == (752,) and t.probs[751] == 1.0 and t.probs[:751].sum() == 0
    np.testing.assert_array_equal(all_in_one(1).probs, [0, 1])
    with pytest.raises(ValueError):
        all_in_one(4, extra_class=False)


def test_slsr_examples():
    t = slsr_target(range(250), 751, cluster_id=0)
    assert t.weight == Fraction(1, 250) == Fraction(4, 1000)
    assert set(np.unique(t.probs[t.probs > 0])) == {0.004}
    np.testing.assert_array_equal(slsr_target(range(10), 10).probs, lsro(10).probs)
    np.testing.assert_allclose(slsr_target({3, 7, 9}, 10).probs, [0, 0, 0, 1 / 3, 0, 0, 0, 1 / 3, 0, 1 / 3])
    with pytest.raises(ValueError):
        slsr_target([], 10)
    with pytest.raises(ValueError):
        slsr_target([10], 10)


@settings(max_examples=200)
@given(st.sets(st.integers(0, 49), min_size=1), st.integers(0, 5))
def test_slsr_support_equals_cluster_support(support, c):
    t = slsr_target(support, 50, cluster_id=c)
    assert t.support == frozenset(support)
    assert t.cluster_id == c
    assert abs(t.probs.sum() - 1) < 1e-9


def test_taxonomy():
    # lsro identical for every generated sample; slsr differs when supports differ
    assert np.array_equal(lsro(6).probs, lsro(6).probs)
    assert not np.array_equal(slsr_target({0, 1}, 6).probs, slsr_target({2, 3, 4}, 6).probs)
    assert pseudo_label([0.1, 0.9]).support != pseudo_label([0.9, 0.1]).support


def test_json_round_trip():
    t = slsr_target({1, 4}, 6, cluster_id=2)
    back = LabelTarget.from_json(t.to_json())
    np.testing.assert_array_equal(back.probs, t.probs)
    assert (back.scheme, back.provenance, back.cluster_id) == ("slsr", "generated", 2)
    assert t.to_json()["indices"] == [1, 4]
