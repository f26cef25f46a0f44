import numpy as np
import pytest

from caet_swin import tensor as T
from caet_swin.attention import (LARGE, MSAParams, build_padding_mask, key_padding_mask,
                                 multi_head_self_attention, scaled_dot_product_attention)
from caet_swin.gradcheck import check_parameters, finite_diff_check
from caet_swin.tensor import ShapeError, Tensor


def naive_attention(q, k, v, mask=None, bias=None):
    """Double loop over queries and keys with an explicit softmax."""
    n, m = q.shape[0], k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        s = np.array([q[i] @ k[j] / np.sqrt(q.shape[1]) for j in range(m)])
        if bias is not None:
            s = s + bias[i]
        if mask is not None:
            s = s + mask[i]
        s = s - s.max()
        w = np.exp(s) / np.exp(s).sum()
        for j in range(m):
            out[i] += w[j] * v[j]
    return out


def naive_msa(x, p: MSAParams, mask=None):
    heads = []
    for i in range(p.h):
        hp = p.head(i)
        heads.append(naive_attention(x @ hp.wq.data, x @ hp.wk.data, x @ hp.wv.data, mask))
    return np.concatenate(heads, axis=1) @ p.wo.data


def test_sdpa_matches_double_loop_on_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n, m, d, dv = (int(v) for v in rng.integers(1, 9, size=4))
        q, k, v = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, dv))
        mask = np.where(rng.random((n, m)) < 0.3, -LARGE, 0.0)
        mask[:, 0] = 0.0
        out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        assert np.abs(out - naive_attention(q, k, v, mask)).max() < 1e-6


def test_msa_matches_per_head_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        n, d, h, dk = (int(v) for v in rng.integers(1, 9, size=4))
        p = MSAParams(d, h, dk, None, rng, dtype=np.float64)
        x = rng.standard_normal((n, d))
        assert np.abs(p(Tensor(x)).data - naive_msa(x, p)).max() < 1e-6


def test_head_views_share_memory():
    p = MSAParams(4, 2, 3, 5, np.random.default_rng(0), dtype=np.float64)
    assert p.wq.shape == (4, 6) and p.wv.shape == (4, 10) and p.wo.shape == (10, 4)
    hp = p.head(1)
    assert np.shares_memory(hp.wq.data, p.wq.data)
    assert np.array_equal(hp.wv.data, p.wv.data[:, 5:])


def test_msa_batched_equals_per_item(rng):
    p = MSAParams(6, 3, 2, 2, rng, dtype=np.float64)
    x = rng.standard_normal((3, 5, 6))
    valid = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 1, 0, 1]], bool)
    batched = multi_head_self_attention(Tensor(x), p, key_padding_mask(valid)).data
    for b in range(3):
        single = naive_msa(x[b], p, build_padding_mask(valid[b]))
        assert np.allclose(batched[b], single, atol=1e-10)


def test_single_key_gives_value_and_uniform_scores_average(rng):
    v = rng.standard_normal((1, 3))
    out = scaled_dot_product_attention(Tensor(rng.standard_normal((4, 2))), Tensor(rng.standard_normal((1, 2))),
                                       Tensor(v)).data
    assert np.allclose(out, np.repeat(v, 4, 0))
    vals = rng.standard_normal((5, 2))
    out = scaled_dot_product_attention(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((5, 3))),
                                       Tensor(vals)).data
    assert np.allclose(out, vals.mean(0))


def test_weights_are_row_stochastic_and_mask_zeroes_hidden_keys(rng):
    mask = build_padding_mask([True, True, False])
    _, w = scaled_dot_product_attention(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4))),
                                        Tensor(rng.standard_normal((3, 2))), mask, return_weights=True)
    assert np.allclose(w.data.sum(-1), 1)
    assert np.all(w.data[:, 2] == 0)


def test_fully_masked_row_is_an_error(rng):
    mask = np.zeros((2, 3))
    mask[1] = -LARGE
    with pytest.raises(ValueError):
        scaled_dot_product_attention(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))), mask)
    with pytest.raises(ValueError):
        build_padding_mask([False, False])


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        scaled_dot_product_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 1))))
    p = MSAParams(4, 2, 2, 2, rng)
    with pytest.raises(ShapeError):
        p(Tensor(np.ones((3, 5), np.float32)))


def test_msa_gradients(rng):
    p = MSAParams(5, 2, 3, 2, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((4, 5)))
    bias = Tensor(0.3 * rng.standard_normal((2, 4, 4)))
    mask = build_padding_mask([True, True, True, False])
    w = rng.standard_normal((4, 5))

    def loss():
        return (multi_head_self_attention(x, p, mask, bias) * Tensor(w)).sum()

    assert max(check_parameters(loss, p.named_parameters()).values()) < 1e-5
    assert finite_diff_check(lambda t: (multi_head_self_attention(t, p, mask, bias) * Tensor(w)).sum(), x) < 1e-5
    assert finite_diff_check(lambda t: (multi_head_self_attention(x, p, mask, t) * Tensor(w)).sum(), bias) < 1e-5


def test_padding_mask_layout():
    m = build_padding_mask([True, False, True])
    assert m.shape == (3, 3)
    assert np.all(m[:, 1] == -LARGE) and np.all(m[:, [0, 2]] == 0)
    kb = key_padding_mask(np.array([[True, False], [True, True]]))
    assert kb.shape == (2, 2, 2) and np.all(kb[1] == 0)
    assert T.softmax(Tensor(m[0] + np.zeros(3)), -1).data[1] == 0
