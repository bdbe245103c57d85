import math

import numpy as np
import pytest

from asr_robust_ser import numkernel as nk
from asr_robust_ser.attention import MHAParams, cross_attn, multihead, scaled_dot_attention, self_attn
from asr_robust_ser.numkernel import DimensionError, Tensor


def random_params(rng, d, heads):
    return MHAParams(*(nk.parameter(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(4)), heads=heads)


def test_single_key_returns_value_row(rng):
    q = Tensor(rng.normal(size=(3, 4)))
    k = Tensor(rng.normal(size=(1, 4)))
    v = Tensor([[1.0, 2.0, 3.0]])
    out, w = scaled_dot_attention(q, k, v)
    assert np.allclose(w.data, 1.0)
    assert np.allclose(out.data, np.tile([1.0, 2.0, 3.0], (3, 1)), atol=1e-15)


def test_identical_keys_split_evenly(rng):
    key = rng.normal(size=(1, 4))
    _, w = scaled_dot_attention(Tensor(rng.normal(size=(2, 4))), Tensor(np.vstack([key, key])), Tensor(rng.normal(size=(2, 3))))
    assert np.allclose(w.data, 0.5, atol=1e-15)


def test_hand_computed_weights():
    _, w = scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor(np.eye(2)))
    e = np.exp([1 / math.sqrt(2), 0.0])
    assert np.allclose(w.data[0], e / e.sum(), rtol=0, atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(DimensionError):
        multihead(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 8))), MHAParams.identity(4))
    with pytest.raises(DimensionError):
        MHAParams.identity(6, heads=4)


def test_identity_single_head_singleton_kv(rng):
    kv = Tensor(rng.normal(size=(1, 4)))
    out = multihead(Tensor(rng.normal(size=(3, 4))), kv, MHAParams.identity(4))
    assert np.allclose(out.data, np.tile(kv.data, (3, 1)), atol=1e-14)
    x = Tensor(rng.normal(size=(1, 4)))
    assert np.allclose(self_attn(x, MHAParams.identity(4)).data, x.data, atol=1e-14)


@pytest.mark.parametrize("lq,lk", [(1, 1), (2, 5), (7, 3)])
def test_output_shape(rng, lq, lk):
    p = random_params(rng, 16, 8)
    out = multihead(Tensor(rng.normal(size=(lq, 16))), Tensor(rng.normal(size=(lk, 16))), p)
    assert out.shape == (lq, 16)


def test_kv_permutation_invariance(rng):
    p = random_params(rng, 16, 8)
    q = Tensor(rng.normal(size=(4, 16)))
    kv = rng.normal(size=(6, 16))
    perm = rng.permutation(6)
    a = multihead(q, Tensor(kv), p).data
    b = multihead(q, Tensor(kv[perm]), p).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_weights_on_simplex(rng):
    p = random_params(rng, 8, 8)
    _, w = multihead(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))), p, return_weights=True)
    assert w.shape == (8, 3, 5)
    assert np.all(w.data >= 0)
    assert np.max(np.abs(w.data.sum(axis=-1) - 1)) < 1e-12


def test_cross_and_self_are_definitional(rng):
    p = random_params(rng, 8, 8)
    a = Tensor(rng.normal(size=(3, 8)))
    b = Tensor(rng.normal(size=(5, 8)))
    assert np.array_equal(cross_attn(a, a, p).data, self_attn(a, p).data)
    assert np.array_equal(self_attn(a, p).data, multihead(a, a, p).data)
    assert cross_attn(a, b, p).shape == (3, 8)


def test_gradient_through_multihead(rng):
    d = 8
    x0 = rng.normal(size=(3, d))
    y0 = rng.normal(size=(4, d))
    ws = [rng.normal(size=(d, d)) / math.sqrt(d) for _ in range(4)]
    target = rng.normal(size=(3, d))

    def f(x, y, wq, wk, wv, wo):
        p = MHAParams(wq, wk, wv, wo, heads=4)
        return nk.sum_all(nk.mul(cross_attn(x, y, p), Tensor(target)))

    assert nk.finite_diff_check(f, [Tensor(x0), Tensor(y0)] + [Tensor(w) for w in ws]) < 1e-4


def test_padded_batch_matches_per_sample(rng):
    p = random_params(rng, 8, 8)
    lens_q, lens_k = [2, 4], [3, 1]
    qs = [rng.normal(size=(n, 8)) for n in lens_q]
    ks = [rng.normal(size=(n, 8)) for n in lens_k]
    Q = np.zeros((2, 4, 8))
    K = np.zeros((2, 3, 8))
    mask = np.zeros((2, 3), dtype=bool)
    for i in range(2):
        Q[i, : lens_q[i]] = qs[i]
        K[i, : lens_k[i]] = ks[i]
        mask[i, : lens_k[i]] = True
    batched = multihead(Tensor(Q), Tensor(K), p, key_mask=mask).data
    for i in range(2):
        single = multihead(Tensor(qs[i]), Tensor(ks[i]), p).data
        assert np.max(np.abs(batched[i, : lens_q[i]] - single)) < 1e-12
