import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_attention
from radarfuse.fusion.attention import (AttentionInputs, EmptyKeysError, attention_backward, attention_gradcheck,
                                        attention_weights, finite_difference_gradcheck, range_adaptive_attention,
                                        scaled_dot_product_attention)


def random_inputs(rng, nq=None, nk=None, d=None):
    nq = nq or int(rng.integers(1, 65))
    nk = nk or int(rng.integers(1, 65))
    d = d or int(rng.integers(1, 33))
    return AttentionInputs(rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), rng.normal(size=(nk, d)),
                           rng.uniform(-30, 30, (nq, 3)), rng.uniform(-30, 30, (nk, 3)))


def test_single_key_returns_value():
    rng = np.random.default_rng(0)
    inp = AttentionInputs(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)),
                          rng.normal(size=(3, 3)), rng.normal(size=(1, 3)))
    np.testing.assert_array_equal(range_adaptive_attention(inp, 1.0, 50.0), np.repeat(inp.v, 3, axis=0))


def test_symmetric_keys_give_mean():
    k = np.array([[1.0, 0.0], [1.0, 0.0]])
    v = np.array([[2.0, 4.0], [6.0, -2.0]])
    inp = AttentionInputs(np.array([[0.3, 0.1]]), k, v, np.zeros((1, 3)), np.array([[1.0, 0, 0], [0, -1.0, 0]]))
    np.testing.assert_allclose(range_adaptive_attention(inp, 2.0, 10.0), [[4.0, 1.0]], atol=1e-15)


def test_closed_form_weights():
    inp = AttentionInputs(np.zeros((1, 2)), np.ones((2, 2)), np.eye(2), np.zeros((1, 3)),
                          np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    w = attention_weights(inp, 1.0, 1.0)[0]
    e = math.exp(-1.0)
    assert w[0] == pytest.approx(1 / (1 + e), abs=1e-15)
    assert w[1] == pytest.approx(e / (1 + e), abs=1e-15)
    assert w[0] == pytest.approx(0.7311, abs=5e-5)


def test_errors():
    with pytest.raises(EmptyKeysError):
        attention_weights(AttentionInputs(np.zeros((1, 2)), np.zeros((0, 2)), np.zeros((0, 2))), 1.0, 1.0)
    with pytest.raises(ValueError):
        attention_weights(AttentionInputs(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2))), 1.0, 0.0)


def test_matches_naive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        inp = random_inputs(rng, int(rng.integers(1, 8)), int(rng.integers(1, 8)), int(rng.integers(1, 6)))
        alpha, r_max = rng.uniform(0, 5), rng.uniform(1, 60)
        out, w = naive_attention(inp.q, inp.k, inp.v, inp.p_q, inp.p_k, alpha, r_max)
        np.testing.assert_allclose(attention_weights(inp, alpha, r_max), w, atol=1e-12)
        np.testing.assert_allclose(range_adaptive_attention(inp, alpha, r_max), out, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 10))
def test_rows_are_distributions(seed, alpha):
    w = attention_weights(random_inputs(np.random.default_rng(seed)), alpha, 50.0)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_alpha_zero_is_plain_attention(seed):
    inp = random_inputs(np.random.default_rng(seed))
    assert np.max(np.abs(range_adaptive_attention(inp, 0.0, 50.0) - scaled_dot_product_attention(inp.q, inp.k, inp.v))) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 5), st.floats(0.01, 5), st.floats(0.1, 20), st.floats(0.1, 20))
def test_penalty_monotone_in_alpha(alpha, step, near, extra):
    inp = AttentionInputs(np.zeros((1, 2)), np.ones((2, 2)), np.eye(2), dist=np.array([[near, near + extra]]))
    lo = attention_weights(inp, alpha, 30.0)[0, 1]
    hi = attention_weights(inp, alpha + step, 30.0)[0, 1]
    assert hi < lo


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, 5, 7, 4)
    scaled = AttentionInputs(inp.q, inp.k, inp.v, inp.p_q * factor, inp.p_k * factor)
    np.testing.assert_allclose(attention_weights(scaled, 1.3, 40.0 * factor), attention_weights(inp, 1.3, 40.0),
                               atol=1e-12)


def test_gradcheck_quadratic():
    x = np.random.default_rng(0).normal(size=10)
    assert finite_difference_gradcheck(lambda z: float(z @ z), lambda z: 2 * z, x, eps=1e-5) < 1e-6


def test_gradcheck_values_and_queries():
    rng = np.random.default_rng(1)
    inp = random_inputs(rng, 6, 9, 5)
    go = np.ones((6, 5))

    def total(q=inp.q, v=inp.v):
        return float(np.sum(range_adaptive_attention(AttentionInputs(q, inp.k, v, inp.p_q, inp.p_k), 0.8, 20.0)))

    err_v = finite_difference_gradcheck(lambda v: total(v=v), lambda v: attention_backward(inp, 0.8, 20.0, go)["v"],
                                        inp.v)
    err_q = finite_difference_gradcheck(lambda q: total(q=q), lambda q: attention_backward(inp, 0.8, 20.0, go)["q"],
                                        inp.q)
    assert err_v < 1e-5
    assert err_q < 1e-4


def test_gradcheck_rejects_nonfinite():
    with pytest.raises(ValueError):
        finite_difference_gradcheck(lambda z: float("nan"), lambda z: z, np.ones(2))


def test_extended_precision_gradcheck_random():
    rng = np.random.default_rng(2)
    for _ in range(10):
        inp = random_inputs(rng, int(rng.integers(1, 20)), int(rng.integers(1, 20)), int(rng.integers(1, 12)))
        errs = attention_gradcheck(inp, float(rng.uniform(0, 3)), 50.0, rng.normal(size=(len(inp.q), inp.v.shape[1])))
        assert max(errs.values()) < 1e-4, errs
