import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nicbench import stats
from oracles import brute_force_p


def test_five_positive_differences():
    assert stats.wilcoxon_one_sided([1] * 5, [0] * 5) == 0.03125


def test_equal_samples_warn_and_return_one():
    with pytest.warns(RuntimeWarning):
        assert stats.wilcoxon_one_sided([0.3] * 6, [0.3] * 6) == 1.0


def test_too_short_rejected():
    with pytest.raises(ValueError):
        stats.wilcoxon_one_sided([1, 2, 3, 4], [0, 0, 0, 0])


def test_exact_matches_enumeration_random_datasets():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(5, 11))
        # rounded values create ties and zeros
        a = np.round(rng.normal(0.3, 1, n), 1)
        b = np.round(rng.normal(0, 1, n), 1)
        if np.all(a == b):
            continue
        assert stats.wilcoxon_one_sided(a, b, "exact") == pytest.approx(brute_force_p(a, b), abs=1e-15)


@given(st.lists(st.integers(-3, 3), min_size=5, max_size=9))
@settings(max_examples=60, deadline=None)
def test_exact_matches_enumeration_property(diffs):
    d = np.array(diffs, float)
    if not np.any(d):
        return
    assert stats.wilcoxon_one_sided(d, np.zeros_like(d), "exact") == pytest.approx(
        brute_force_p(d, np.zeros_like(d)), abs=1e-15)


def test_exact_and_normal_agree_at_twenty():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(0.2, 1, 20), rng.normal(0, 1, 20)
        pe = stats.wilcoxon_one_sided(a, b, "exact")
        pn = stats.wilcoxon_one_sided(a, b, "normal")
        assert abs(pe - pn) <= 0.01


def test_large_sample_uses_normal():
    rng = np.random.default_rng(2)
    a, b = rng.normal(0.5, 1, 40), rng.normal(0, 1, 40)
    assert stats.wilcoxon_one_sided(a, b) == stats.wilcoxon_one_sided(a, b, "normal")


def test_bonferroni():
    assert stats.bonferroni([0.01], 10)[0] == pytest.approx(0.1, abs=1e-15)
    assert stats.bonferroni([0.5], 10)[0] == 1.0
    assert stats.bonferroni([0.02, 0.3], 1).tolist() == [0.02, 0.3]


def test_spearman_hand_cases():
    assert stats.spearman([1, 2, 3, 4], [2, 5, 7, 9]) == pytest.approx(1.0, abs=1e-15)
    assert stats.spearman([1, 2, 3, 4], [9, 7, 5, 2]) == pytest.approx(-1.0, abs=1e-15)
    assert stats.spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValueError):
        stats.spearman([1, 2], [1, 2])
