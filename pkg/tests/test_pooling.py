import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainkb.numcore import sigmoid
from chainkb.pooling import AVERAGE, LSE, MAX, NoPathsError, PoolingKind, pool, pool_backward, top_k

scores_st = st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=12)
kinds = [MAX, AVERAGE, LSE, top_k(1), top_k(3), top_k(5)]


class TestExamples:
    def test_average(self):
        r = pool([1.0, 2.0, 3.0], AVERAGE)
        assert r.pooled == 2.0 and r.probability == sigmoid(2.0)
        assert np.allclose(r.weights, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_lse_symmetric(self):
        r = pool([0.0, 0.0], LSE)
        assert r.pooled == pytest.approx(math.log(2), abs=1e-15)
        assert r.weights.tolist() == [0.5, 0.5]

    @pytest.mark.parametrize("kind", kinds, ids=str)
    def test_single_score(self, kind):
        assert pool([1.7], kind).pooled == 1.7

    def test_lse_weights_are_softmax(self):
        s = np.array([0.3, -1.2, 2.0, 0.0])
        expected = np.exp(s) / np.exp(s).sum()
        assert np.allclose(pool(s, LSE).weights, expected, rtol=0, atol=1e-12)

    def test_max_tie_goes_to_lowest_index(self):
        assert pool_backward([5.0, 5.0], MAX, 1.0).tolist() == [1.0, 0.0]

    def test_topk_tie_membership(self):
        assert pool_backward([1.0, 2.0, 2.0, 2.0], top_k(2), 1.0).tolist() == [0.0, 0.5, 0.5, 0.0]

    def test_average_backward(self):
        assert pool_backward([1.0, 9.0, -4.0, 0.0], AVERAGE, 2.0).tolist() == [0.5] * 4

    def test_lse_backward_finite_difference(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=6) * 3
        g = pool_backward(s, LSE, 1.0)
        for i in range(len(s)):
            e = np.zeros_like(s)
            e[i] = 1e-6
            num = (pool(s + e, LSE).pooled - pool(s - e, LSE).pooled) / 2e-6
            assert abs(num - g[i]) / max(abs(g[i]), 1e-12) < 1e-6

    def test_no_paths(self):
        with pytest.raises(NoPathsError, match="no paths"):
            pool([], MAX)

    def test_lse_no_overflow(self):
        r = pool([1000.0, 999.0], LSE)
        assert r.pooled == pytest.approx(1000 + math.log1p(math.exp(-1)))

    def test_parse(self):
        assert PoolingKind.parse("max") == MAX
        assert PoolingKind.parse("avg") == AVERAGE
        assert PoolingKind.parse("lse") == LSE
        assert PoolingKind.parse("topk:3") == top_k(3)
        with pytest.raises(ValueError):
            PoolingKind.parse("median")
        with pytest.raises(ValueError):
            top_k(0)


@given(scores_st)
def test_lse_sandwich(xs):
    s = np.array(xs)
    lse = pool(s, LSE).pooled
    assert s.max() <= lse <= s.max() + math.log(len(s)) + 1e-12


@given(scores_st, st.floats(-100, 100, allow_nan=False))
def test_lse_translation(xs, c):
    s = np.array(xs)
    assert pool(s + c, LSE).pooled == pytest.approx(pool(s, LSE).pooled + c, abs=1e-9)


@given(scores_st)
def test_topk1_is_max(xs):
    a, b = pool(xs, top_k(1)), pool(xs, MAX)
    assert a.pooled == b.pooled == max(xs)
    assert np.array_equal(a.weights, b.weights)


@given(scores_st, st.sampled_from(kinds), st.randoms(use_true_random=False))
def test_sparsity_and_permutation(xs, kind, rnd):
    n = len(xs)
    w = pool_backward(xs, kind, 1.0)
    expect = n if kind.name in ("average", "logsumexp") else min(1 if kind.name == "max" else kind.k, n)
    assert np.count_nonzero(w) == expect
    assert math.isclose(w.sum(), 1.0, abs_tol=1e-12)
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    assert pool(shuffled, kind).probability == pytest.approx(pool(xs, kind).probability, abs=1e-12)
    assert 0.0 < pool(xs, kind).probability < 1.0
