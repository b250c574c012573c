import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainkb.numcore import (
    AdamState,
    DimensionError,
    NonFiniteError,
    adam_step,
    check_gradients,
    derive_rng,
    glorot_uniform,
    matvec,
    relu,
    relu_grad,
    sigmoid,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def loop_matvec(M, v):
    out = []
    for i in range(len(M)):
        acc = 0.0
        for j in range(len(v)):
            acc += M[i][j] * v[j]
        out.append(acc)
    return out


class TestMatvec:
    def test_identity(self):
        assert matvec(np.eye(3), np.array([1.0, 2.0, 3.0])).tolist() == [1.0, 2.0, 3.0]

    def test_zero(self):
        assert matvec(np.zeros((2, 2)), np.array([5.0, 7.0])).tolist() == [0.0, 0.0]

    def test_random_matches_loop_exactly(self):
        rng = np.random.default_rng(3)
        M, v = rng.normal(size=(4, 3)), rng.normal(size=3)
        assert matvec(M, v).tolist() == loop_matvec(M.tolist(), v.tolist())

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_bit_exact_property(self, r, c, seed):
        rng = np.random.default_rng(seed)
        M, v = rng.normal(size=(r, c)) * 1e3, rng.normal(size=c)
        assert matvec(M, v).tolist() == loop_matvec(M.tolist(), v.tolist())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matvec(np.zeros((2, 3)), np.zeros(2))


class TestActivations:
    def test_relu(self):
        assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
        assert relu_grad(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 1.0]

    @given(st.lists(finite, min_size=1, max_size=10))
    def test_relu_idempotent(self, xs):
        v = np.array(xs)
        assert np.array_equal(relu(relu(v)), relu(v))

    def test_sigmoid_zero(self):
        assert sigmoid(0.0) == 0.5

    @given(finite)
    def test_sigmoid_symmetry(self, x):
        assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12

    def test_sigmoid_far_negative(self):
        y = sigmoid(-1000.0)
        exact = 1 / (1 + mpmath.exp(mpmath.mpf(1000)))
        assert 0.0 < y <= 1e-300
        # exact value (~5e-435) is below the smallest subnormal; the nearest
        # positive double is returned
        assert exact < mpmath.mpf(y) and y == np.nextafter(0.0, 1.0)
        assert sigmoid(np.array([-1000.0]))[0] == y

    def test_sigmoid_matches_mpmath(self):
        for x in (-700.0, -36.5, -1.25, 0.3, 20.0, 700.0):
            exact = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
            assert sigmoid(x) == pytest.approx(exact, rel=1e-14)
            assert sigmoid(np.array([x]))[0] == pytest.approx(exact, rel=1e-14)

    @given(finite, finite)
    def test_sigmoid_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        assert sigmoid(lo) <= sigmoid(hi)
        assert 0.0 < sigmoid(a) < 1.0


def adam_oracle(p, gs, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    with mpmath.workdps(40):
        return _adam_oracle(p, gs, lr, b1, b2, eps)


def _adam_oracle(p, gs, lr, b1, b2, eps):
    p, m, v = mpmath.mpf(p), mpmath.mpf(0), mpmath.mpf(0)
    out = []
    for t, g in enumerate(gs, 1):
        g = mpmath.mpf(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - mpmath.mpf(b1) ** t)) / (mpmath.sqrt(v / (1 - mpmath.mpf(b2) ** t)) + eps)
        out.append(p)
    return out


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = AdamState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2)}, st_)
        assert p["w"].tolist() == [1.0, -2.0]
        assert st_.step == 3

    def test_single_step(self):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState())
        # m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_trace_matches_high_precision(self):
        gs = [0.7, 0.7, -0.3, 2.5]
        p = {"w": np.array([0.25])}
        st_ = AdamState()
        ref = adam_oracle(0.25, gs)
        for g, r in zip(gs, ref):
            adam_step(p, {"w": np.array([g])}, st_)
            assert p["w"][0] == pytest.approx(float(r), rel=1e-10)

    def test_rejects_non_finite(self):
        p = {"w": np.zeros(2), "u": np.zeros(1)}
        with pytest.raises(NonFiniteError, match="'w'"):
            adam_step(p, {"u": np.ones(1), "w": np.array([1.0, np.nan])}, AdamState())
        assert p["u"][0] == 0.0

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestGradientChecker:
    def test_quadratic(self):
        p = {"a": np.array([1.0, -2.0, 0.5]), "b": np.array([[3.0]])}

        def loss(ps):
            return 0.5 * sum(float(np.sum(x * x)) for x in ps.values())

        rep = check_gradients(loss, p, {k: v.copy() for k, v in p.items()})
        assert rep.passed and rep.max_rel_error < 1e-8
        assert rep.n_checked == 4

    def test_corrupted_coordinate_reported(self):
        p = {"a": np.array([1.0, -2.0, 0.5])}
        g = {"a": p["a"].copy()}
        g["a"][1] *= 2
        rep = check_gradients(lambda ps: 0.5 * float(np.sum(ps["a"] ** 2)), p, g)
        assert not rep.passed
        assert [(f[0], f[1]) for f in rep.failures] == [("a", (1,))]

    def test_non_finite_loss(self):
        with pytest.raises(NonFiniteError):
            check_gradients(lambda ps: math.inf, {"a": np.zeros(1)}, {})

    def test_kink_coordinates_skipped(self):
        p = {"a": np.array([0.0, 1.0])}
        rep = check_gradients(
            lambda ps: float(np.sum(np.maximum(ps["a"], 0.0))),
            p,
            {"a": np.array([0.0, 1.0])},
            kink_fn=lambda ps: ps["a"],
        )
        assert rep.n_skipped == 1 and rep.n_checked == 1 and rep.passed


class TestRng:
    def test_streams_reproducible_and_distinct(self):
        a = derive_rng(5, "x", 1).random(4)
        assert np.array_equal(a, derive_rng(5, "x", 1).random(4))
        assert not np.array_equal(a, derive_rng(5, "x", 2).random(4))
        assert not np.array_equal(a, derive_rng(6, "x", 1).random(4))

    def test_glorot_bounds(self):
        w = glorot_uniform(derive_rng(0), (30, 20))
        assert w.dtype == np.float64 and np.abs(w).max() <= math.sqrt(6 / 50)
