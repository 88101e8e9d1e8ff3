"""Multi-head attention against brute-force oracles and finite differences."""

import numpy as np
import pytest

from camogen.attention import init_attention, multi_head_attention
from camogen.autograd import Tensor, square, tmean
from camogen.errors import ConfigError, DimensionError
from camogen.gradcheck import grad_check
from camogen.params import ParamStore
from camogen.rng import Rng


def identity_params(store, dim):
    p = init_attention(store, "attn", Rng(0), dq=dim, dkv=dim, dout=dim,
                       heads=1, dtype=np.float64)
    p.wq.data[:] = np.eye(dim)
    p.wk.data[:] = np.eye(dim)
    p.wv.data[:] = np.eye(dim)
    p.wo.data[:] = np.eye(dim)
    return p


def oracle_attention(q, k, v, wq, wk, wv, wo, heads):
    """Independent dense implementation used to cross-check the graph one."""
    dh = wq.shape[1] // heads
    outs = []
    for h in range(heads):
        qh = q @ wq[:, h * dh:(h + 1) * dh]
        kh = k @ wk[:, h * dh:(h + 1) * dh]
        vh = v @ wv[:, h * dh:(h + 1) * dh]
        scores = qh @ kh.T / np.sqrt(dh)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        outs.append(weights @ vh)
    return np.concatenate(outs, axis=1) @ wo


def test_single_key_weight_is_one():
    rng = Rng(5, "sk")
    store = ParamStore()
    p = init_attention(store, "attn", rng, dq=4, dkv=4, dout=4, heads=2,
                       dtype=np.float64)
    q = Tensor(rng.normal((3, 4), dtype=np.float64))
    kv = Tensor(rng.normal((1, 4), dtype=np.float64))
    out = multi_head_attention(q, kv, kv, p).data
    expected = (kv.data @ p.wv.data) @ p.wo.data  # softmax of a singleton is 1
    np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)


def test_reference_two_key_case():
    store = ParamStore()
    p = identity_params(store, 2)
    q = Tensor(np.array([[1.0, 0.0]]))
    kv = Tensor(np.eye(2))
    out = multi_head_attention(q, kv, kv, p).data
    np.testing.assert_allclose(out, [[0.6698, 0.3302]], atol=1e-4)


def test_matches_bruteforce_oracle_multihead():
    rng = Rng(12, "oracle")
    store = ParamStore()
    p = init_attention(store, "attn", rng.split("p"), dq=3, dkv=5, dout=8,
                       heads=4, dtype=np.float64)
    q = rng.normal((6, 3), dtype=np.float64)
    k = rng.normal((4, 5), dtype=np.float64)
    v = rng.normal((4, 5), dtype=np.float64)
    got = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), p).data
    want = oracle_attention(q, k, v, p.wq.data, p.wk.data, p.wv.data,
                            p.wo.data, heads=4)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_attention_rows_sum_to_one():
    # with Wv = Wo = I and basis-vector values, outputs ARE the attention rows
    store = ParamStore()
    p = identity_params(store, 3)
    rng = Rng(9, "rows")
    q = Tensor(rng.normal((5, 3), dtype=np.float64) * 3)
    kv_keys = Tensor(rng.normal((3, 3), dtype=np.float64))
    values = Tensor(np.eye(3))
    out = multi_head_attention(q, kv_keys, values, p).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-6)


def test_duplicate_queries_give_identical_rows():
    rng = Rng(2, "dup")
    store = ParamStore()
    p = init_attention(store, "attn", rng, dq=3, dkv=3, dout=6, heads=2,
                       dtype=np.float64)
    row = rng.normal((1, 3), dtype=np.float64)
    q = Tensor(np.repeat(row, 4, axis=0))
    kv = Tensor(rng.normal((5, 3), dtype=np.float64))
    out = multi_head_attention(q, kv, kv, p).data
    for i in range(1, 4):
        np.testing.assert_array_equal(out[0], out[i])


def test_projection_gradients_match_finite_differences():
    rng = Rng(21, "fd")
    store = ParamStore()
    p = init_attention(store, "attn", rng.split("p"), dq=3, dkv=4, dout=4,
                       heads=2, dtype=np.float64)
    q = Tensor(rng.normal((3, 3), dtype=np.float64))
    k = Tensor(rng.normal((5, 4), dtype=np.float64))
    v = Tensor(rng.normal((5, 4), dtype=np.float64))

    def f():
        return tmean(square(multi_head_attention(q, k, v, p)))

    report = grad_check(f, store, tol=1e-4)
    assert report.passed, str(report)
    assert set(report.per_param) == {"attn/wq", "attn/wk", "attn/wv", "attn/wo"}


def test_indivisible_heads_rejected():
    with pytest.raises(ConfigError):
        init_attention(ParamStore(), "attn", Rng(0), dq=4, dkv=4, dout=6, heads=4)
    with pytest.raises(ConfigError):
        init_attention(ParamStore(), "attn", Rng(0), dq=4, dkv=4, dout=4, heads=0)


def test_bad_input_shapes_rejected():
    store = ParamStore()
    p = init_attention(store, "attn", Rng(0), dq=4, dkv=4, dout=4, heads=1)
    good = Tensor(np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(np.zeros((2, 3), dtype=np.float32)), good, good, p)
    with pytest.raises(DimensionError):
        multi_head_attention(good, good, Tensor(np.zeros((3, 4), dtype=np.float32)), p)
