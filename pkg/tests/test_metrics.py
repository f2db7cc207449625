import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abm.metrics import (
    DEFAULT_BUCKETS, EvalReport, MetricInputError, accuracy_by_length, edit_distance, exprate_at_k,
    prefix_suffix_accuracy, wer,
)
from abm.nn import ConfigError
from oracles import edit_distance_dp

tokens = st.lists(st.sampled_from("abcxyz"), max_size=9)


@pytest.mark.parametrize("a,b,d", [("a b c", "a b c", 0), ("a b c", "a x c", 1), ("a b", "b a c", 2)])
def test_edit_distance_examples(a, b, d):
    assert edit_distance(a.split(), b.split()) == d


def test_edit_distance_matches_dp_on_ten_thousand_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a = rng.integers(0, 6, rng.integers(0, 14)).tolist()
        b = rng.integers(0, 6, rng.integers(0, 14)).tolist()
        assert edit_distance(a, b) == edit_distance_dp(a, b)


@settings(max_examples=150, deadline=None)
@given(tokens, tokens, tokens)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, a) == 0
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, b) == edit_distance(b, a) == edit_distance_dp(a, b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_exprate_examples():
    refs = [[1, 2], [3], [4, 5, 6], [7]]
    preds = [[1, 2], [3], [4, 9, 6], [7]]
    assert exprate_at_k(refs, refs, 0) == 100.0
    assert exprate_at_k(preds, refs, 0) == 75.0
    assert exprate_at_k(preds, refs, 1) == 100.0
    with pytest.raises(MetricInputError):
        exprate_at_k(preds[:3], refs, 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(tokens, tokens), min_size=1, max_size=8))
def test_exprate_monotone_in_k_and_exact_at_zero(pairs):
    preds, refs = [p for p, _ in pairs], [r for _, r in pairs]
    rates = [exprate_at_k(preds, refs, k) for k in range(4)]
    assert rates == sorted(rates)
    assert rates[0] == 100.0 * sum(p == r for p, r in pairs) / len(pairs)


def test_wer_examples():
    assert wer([[1, 2, 3, 4]], [[1, 2, 3, 4]]) == 0.0
    assert wer([[1, 9, 3, 4]], [[1, 2, 3, 4]]) == 25.0
    with pytest.raises(MetricInputError):
        wer([], [])


def test_wer_is_corpus_level_with_per_sample_flag():
    rng = np.random.default_rng(1)
    refs = [rng.integers(0, 4, rng.integers(1, 9)).tolist() for _ in range(30)]
    preds = [rng.integers(0, 4, rng.integers(0, 9)).tolist() for _ in range(30)]
    dists = [edit_distance_dp(p, r) for p, r in zip(preds, refs)]
    assert wer(preds, refs) == pytest.approx(100 * sum(dists) / sum(map(len, refs)), rel=1e-12)
    assert wer(preds, refs, per_sample=True) == pytest.approx(
        100 * np.mean([d / len(r) for d, r in zip(dists, refs)]), rel=1e-12)


def test_prefix_suffix_examples():
    refs = [[1, 2, 3, 4]]
    assert prefix_suffix_accuracy(refs, refs, 2) == (100.0, 100.0)
    assert prefix_suffix_accuracy([[1, 2, 3, 9]], refs, 2) == (100.0, 0.0)
    # shorter reference than n: compare the whole reference
    assert prefix_suffix_accuracy([[5]], [[5]], 5) == (100.0, 100.0)
    assert prefix_suffix_accuracy([[5, 6]], [[5]], 5) == (100.0, 0.0)
    with pytest.raises(ConfigError):
        prefix_suffix_accuracy(refs, refs, 0)


def test_length_buckets():
    assert [lo for lo, _ in DEFAULT_BUCKETS] == [1, 11, 21, 31, 41] and DEFAULT_BUCKETS[-1][1] == math.inf
    refs = [[1] * 3, [1] * 12, [1] * 15]
    preds = [[1] * 3, [1] * 12, [2] * 15]
    out = accuracy_by_length(preds, refs)
    assert out == {"[1,10]": 100.0, "[11,20]": 50.0}
    assert accuracy_by_length(preds, refs, [(1, math.inf)]) == {"[1,inf]": exprate_at_k(preds, refs, 0)}
    with pytest.raises(ConfigError):
        accuracy_by_length(preds, refs, [(1, 10), (10, 20)])


def test_report_invariants_and_serialization():
    rng = np.random.default_rng(2)
    refs = [rng.integers(0, 4, rng.integers(1, 25)).tolist() for _ in range(40)]
    preds = [r if rng.random() < 0.4 else r[:-1] + [9] for r in refs]
    rep = EvalReport.compute(preds, refs)
    assert 0 <= rep.exprate <= rep.le1 <= rep.le2 <= 100
    assert "exprate" in rep.table() and rep.to_csv().startswith("metric,value\n")
    assert {"prefix2", "suffix5"} <= {k for k, _ in rep.rows()}
