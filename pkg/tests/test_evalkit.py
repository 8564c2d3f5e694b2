import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cftrec.errors import ConfigError, DataError
from cftrec.evalkit import build_test_inputs, distribution_divergence, evaluate, group_distribution, hit_rate, ndcg


def _brute(recs, targets, k):
    hr = dc = 0.0
    for lst, t in zip(recs, targets):
        for pos in range(k):
            if lst[pos] == t:
                hr += 1.0
                dc += 1.0 / math.log2(pos + 2)
                break
    return hr / len(recs), dc / len(recs)


def test_ndcg_spot_values():
    assert ndcg([[7, 1, 2, 3, 4]], [7], 5) == 1.0
    assert ndcg([[1, 2, 7, 3, 4]], [7], 5) == 0.5
    assert ndcg([[1, 2, 3, 4, 5, 7]], [7], 5) == 0.0
    assert hit_rate([[1, 2, 3, 4, 5, 7]], [7], 6) == 1.0


def test_random_rankings_match_brute_force():
    rng = np.random.default_rng(0)
    recs = [rng.permutation(30)[:10].tolist() for _ in range(1000)]
    targets = rng.integers(0, 30, 1000).tolist()
    for k in (1, 5, 10):
        hr, dc = _brute(recs, targets, k)
        assert hit_rate(recs, targets, k) == pytest.approx(hr, abs=1e-12)
        assert ndcg(recs, targets, k) == pytest.approx(dc, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.permutations(list(range(8))), st.integers(0, 9)), min_size=1, max_size=20), st.integers(1, 8))
def test_metric_bounds(rows, k):
    recs, targets = [r for r, _ in rows], [t for _, t in rows]
    hr, nd = hit_rate(recs, targets, k), ndcg(recs, targets, k)
    assert 0.0 <= nd <= hr <= 1.0


def test_ndcg_equals_hr_when_hits_are_first():
    recs = [[3, 1, 2], [5, 6, 7], [9, 0, 1]]
    targets = [3, 4, 9]
    assert ndcg(recs, targets, 3) == hit_rate(recs, targets, 3) == pytest.approx(2 / 3)


def test_evaluate_report():
    rep = evaluate([[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]] * 2, [0, 9])
    assert rep.hr == {5: 0.5, 10: 1.0}
    assert rep.ndcg[5] == 0.5
    assert rep.n_test == 2


def test_metric_errors():
    with pytest.raises(DataError):
        hit_rate([[1, 2]], [1, 2], 1)
    with pytest.raises(DataError):
        hit_rate([], [], 1)
    with pytest.raises(DataError):
        hit_rate([[1, 2]], [1], 3)
    with pytest.raises(ConfigError):
        ndcg([[1]], [1], 0)


def test_group_distribution_examples():
    groups = {0: 0, 1: 4, 2: 4, 3: 0, 4: 4}
    d = group_distribution([[0, 1, 2, 3, 4]], groups, 5, list_len=5)
    assert d.shares == pytest.approx([0.4, 0, 0, 0, 0.6])
    d2 = group_distribution([[0, 3], [1, 2]], groups, 5, list_len=2)
    assert d2.shares == pytest.approx([0.5, 0, 0, 0, 0.5])
    with pytest.raises(DataError):
        group_distribution([[0, 1]], groups, 5, list_len=3)
    with pytest.raises(DataError):
        group_distribution([[0, 99]], groups, 5, list_len=2)


def test_js_examples():
    assert distribution_divergence([1, 0], [0, 1]) == pytest.approx(math.log(2), abs=1e-15)
    assert distribution_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    p, q = [0.1, 0.6, 0.3], [0.5, 0.25, 0.25]
    assert distribution_divergence(p, q) == pytest.approx(distribution_divergence(q, p), abs=1e-15)
    with pytest.raises(DataError):
        distribution_divergence([0.5, 0.5], [1, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.floats(0.01, 1.0), min_size=len(a), max_size=len(a)))))
def test_js_bounded(pq):
    p, q = (np.asarray(v) / np.sum(v) for v in pq)
    js = distribution_divergence(p, q)
    assert 0.0 <= js <= math.log(2) + 1e-12


def test_build_test_inputs(small_corpus):
    cat, data, vocab = small_corpus
    inp = build_test_inputs(data, cat, vocab)
    assert len(inp.samples) == len(data.test)
    assert all(len(a) > len(b) for a, b in zip(inp.with_history, inp.without_history))
    with pytest.raises(DataError):
        build_test_inputs([], cat, vocab)
