import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ltce.metrics import (
    TrialResult,
    aggregate,
    eps_ate,
    eps_cate,
    paired_t_test,
    student_t_sf2,
)

floats = st.floats(-1e3, 1e3, allow_nan=False)


def test_eps_ate_examples():
    truth = np.array([1.0, -2.0, 0.5])
    assert eps_ate(truth, truth) == 0.0
    assert eps_ate(truth + 2, truth) == pytest.approx(2.0)
    assert eps_ate(truth - 2, truth) == pytest.approx(2.0)
    assert eps_ate(np.array([3.0, -3.0]), np.zeros(2)) == 0.0


def test_eps_cate_examples():
    t = np.array([0.3, 0.7])
    assert eps_cate(t, t) == 0.0
    assert eps_cate(t + 1.5, t) == pytest.approx(1.5)
    assert eps_cate(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_length_mismatch():
    with pytest.raises(ValueError):
        eps_cate(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        eps_ate(np.zeros(2), np.zeros(3))


@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=30))
def test_cate_error_bounds_mean_error(pairs):
    est, truth = np.array(pairs).T
    assert eps_cate(est, truth) >= eps_ate(est, truth) - 1e-9


@given(st.lists(st.tuples(floats, floats), min_size=2, max_size=30), st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    est, truth = np.array(pairs).T
    idx = list(range(len(est)))
    rnd.shuffle(idx)
    assert eps_cate(est[idx], truth[idx]) == pytest.approx(eps_cate(est, truth), rel=1e-12, abs=1e-12)
    assert eps_ate(est[idx], truth[idx]) == pytest.approx(eps_ate(est, truth), rel=1e-9, abs=1e-9)


# ------------------------------------------------------------- aggregate

def test_aggregate_mean_and_sample_std():
    trials = [TrialResult("m", 1.0, 1.0, 0), TrialResult("m", 3.0, 3.0, 1)]
    agg = aggregate(trials)
    assert agg.mean("m") == 2.0
    assert agg.std("m") == pytest.approx(math.sqrt(2))
    same = aggregate([TrialResult("m", 0.5, 0.5, k) for k in range(4)])
    assert same.std("m", "eps_ate") == 0.0


def test_aggregate_rejects_empty_and_negative():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        TrialResult("m", -1.0, 0.0, 0)


def test_aggregate_pvalues_against_reference():
    rng = np.random.default_rng(0)
    trials = []
    for k in range(10):
        base = rng.uniform(1, 2)
        trials.append(TrialResult("ref", base, base, k))
        trials.append(TrialResult("better", base - 0.5 + rng.normal() * 0.01, base - 0.5, k))
    agg = aggregate(trials, reference="ref")
    assert agg.pvalues["better"]["eps_ate"] < 1e-6
    assert agg.pvalues["better"]["eps_cate"] == 0.0  # constant difference
    assert "ref" not in agg.pvalues


# ----------------------------------------------------------------- t-test

def _series_with_t(t, n):
    base = np.linspace(-1, 1, n)
    base = base / base.std(ddof=1)
    shift = t / math.sqrt(n)
    return base + shift, np.zeros(n)


def test_t_table_value():
    # two-sided 5% critical value of Student's t with 9 df is 2.262
    a, b = _series_with_t(2.262, 10)
    res = paired_t_test(a, b)
    assert res.df == 9
    assert res.t == pytest.approx(2.262, abs=1e-9)
    assert abs(res.p - 0.050) < 0.001


@pytest.mark.parametrize("t,df", [(0.3, 3), (1.0, 9), (2.5, 19), (4.0, 2), (-1.7, 30)])
def test_tail_matches_reference_cdf(t, df):
    assert abs(student_t_sf2(t, df) - 2 * stats.t.sf(abs(t), df)) < 1e-8


def test_identical_series_give_p_one():
    a = [1.0, 2.0, 3.0]
    res = paired_t_test(a, a)
    assert res.p == 1.0 and not res.degenerate


def test_constant_difference_is_flagged():
    res = paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert res.p == 0.0 and res.degenerate


def test_t_test_input_checks():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [1.0])
