import math

import numpy as np
import pytest

from lgseg import blocks as bk
from lgseg import numerics as nx
from lgseg.numerics import Tensor, param_gradcheck


def _linear(rng, d_in, d_out, name="l"):
    p = bk.LinearParams.init(rng, name, d_in, d_out)
    p.W.data[...] = rng.normal(size=(d_in, d_out))
    p.b.data[...] = rng.normal(size=d_out)
    return p


def _mhsa(rng, c, heads, scale=1.0):
    p = bk.MhsaParams.init(rng, "a", c, heads)
    for lin in (p.q, p.k, p.v, p.out):
        lin.W.data[...] = rng.normal(scale=scale, size=lin.W.shape)
        lin.b.data[...] = rng.normal(scale=scale, size=lin.b.shape)
    return p


def _attention_oracle(xq, xkv, p):
    """Per-head loops over plain numpy."""
    h, d = p.heads, p.head_dim
    q = xq @ p.q.W.data + p.q.b.data
    k = xkv @ p.k.W.data + p.k.b.data
    v = xkv @ p.v.W.data + p.v.b.data
    heads, weights = [], []
    for i in range(h):
        sl = slice(i * d, (i + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        weights.append(w)
        heads.append(w @ v[:, sl])
    return np.concatenate(heads, -1) @ p.out.W.data + p.out.b.data, np.stack(weights)


class TestLinear:
    def test_identity(self, rng):
        p = bk.LinearParams.init(rng, "l", 4, 4)
        p.W.data[...] = np.eye(4)
        x = rng.normal(size=(3, 4))
        assert np.array_equal(bk.linear(x, p).data, x)

    def test_zero_input_gives_bias(self, rng):
        p = _linear(rng, 3, 5)
        out = bk.linear(np.zeros((4, 3)), p).data
        assert np.array_equal(out, np.broadcast_to(p.b.data, (4, 5)))

    def test_matmul_oracle(self, rng):
        p = _linear(rng, 6, 2)
        x = rng.normal(size=(5, 6))
        assert np.abs(bk.linear(x, p).data - (x @ p.W.data + p.b.data)).max() <= 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(nx.ShapeError):
            bk.linear(np.ones((2, 3)), _linear(rng, 4, 2))

    def test_gradcheck(self, rng):
        p = _linear(rng, 4, 3)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(5, 3))
        assert param_gradcheck(lambda: nx.tsum(bk.linear(x, p) * w), [p.W, p.b]) <= 1e-4


class TestCrossAttention:
    def test_single_kv_token(self, rng):
        p = _mhsa(rng, 8, 2)
        xq, xkv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 1, 8))
        out, w = bk.cross_attention(xq, xkv, p)
        assert np.all(w.data == 1.0)
        v = xkv[0] @ p.v.W.data + p.v.b.data
        expected = v @ p.out.W.data + p.out.b.data
        np.testing.assert_allclose(out.data[0], np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_zero_qk_is_mean_pooling(self, rng):
        p = _mhsa(rng, 8, 2)
        for lin in (p.q, p.k):
            lin.W.data[...] = 0
            lin.b.data[...] = 0
        xq, xkv = rng.normal(size=(1, 2, 8)), rng.normal(size=(1, 5, 8))
        out, w = bk.cross_attention(xq, xkv, p)
        assert np.abs(w.data - 0.2).max() <= 1e-15
        v = xkv[0] @ p.v.W.data + p.v.b.data
        expected = v.mean(0) @ p.out.W.data + p.out.b.data
        assert np.abs(out.data[0] - expected).max() <= 1e-12

    def test_hand_set_two_token_softmax(self, rng):
        # one head, d=1: q = 1, keys 0 and ln2 -> logits [0, ln2]
        p = bk.MhsaParams.init(rng, "a", 1, 1)
        p.q.W.data[...] = 1.0
        p.k.W.data[...] = 1.0
        for lin in (p.q, p.k, p.v, p.out):
            lin.b.data[...] = 0
        p.v.W.data[...] = 1.0
        p.out.W.data[...] = 1.0
        kv = np.array([[[0.0], [math.log(2)]]])
        out, w = bk.cross_attention(np.ones((1, 1, 1)), kv, p)
        np.testing.assert_allclose(w.data[0, 0, 0], [1 / 3, 2 / 3], atol=1e-15)
        np.testing.assert_allclose(out.data[0, 0, 0], 2 / 3 * math.log(2), atol=1e-15)

    def test_matches_loop_oracle(self, rng):
        p = _mhsa(rng, 12, 3, scale=0.5)
        xq, xkv = rng.normal(size=(1, 4, 12)), rng.normal(size=(1, 7, 12))
        out, w = bk.cross_attention(xq, xkv, p)
        ref_out, ref_w = _attention_oracle(xq[0], xkv[0], p)
        assert np.abs(out.data[0] - ref_out).max() <= 1e-12
        assert np.abs(w.data[0] - ref_w).max() <= 1e-12

    def test_rows_sum_to_one(self, rng):
        p = _mhsa(rng, 12, 6, scale=2.0)
        _, w = bk.cross_attention(rng.normal(size=(2, 5, 12)), rng.normal(size=(2, 9, 12)), p)
        assert np.abs(w.data.sum(-1) - 1).max() <= 1e-12

    def test_kv_permutation(self, rng):
        p = _mhsa(rng, 8, 2)
        xq, xkv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 6, 8))
        perm = rng.permutation(6)
        out1, w1 = bk.cross_attention(xq, xkv, p)
        out2, w2 = bk.cross_attention(xq, xkv[:, perm], p)
        assert np.abs(w2.data - w1.data[..., perm]).max() <= 1e-12
        assert np.abs(out2.data - out1.data).max() <= 1e-12

    def test_empty_kv_fails(self, rng):
        with pytest.raises(ValueError):
            bk.cross_attention(np.ones((1, 2, 8)), np.ones((1, 0, 8)), _mhsa(rng, 8, 2))

    def test_head_dim_default(self, rng):
        p = bk.MhsaParams.init(rng, "a", 64, 6)
        assert p.head_dim == 10 and p.q.W.shape == (64, 60) and p.out.W.shape == (60, 64)


class TestMhsa:
    def test_equals_self_cross_attention(self, rng):
        p = _mhsa(rng, 8, 2)
        x = rng.normal(size=(2, 5, 8))
        assert np.abs(bk.mhsa(x, p).data - bk.cross_attention(x, x, p)[0].data).max() <= 1e-12

    def test_single_token_value_path(self, rng):
        p = _mhsa(rng, 8, 4)
        x = rng.normal(size=(1, 1, 8))
        expected = (x[0] @ p.v.W.data + p.v.b.data) @ p.out.W.data + p.out.b.data
        assert np.abs(bk.mhsa(x, p).data[0] - expected).max() <= 1e-12

    def test_gradcheck(self, rng):
        p = _mhsa(rng, 6, 2, scale=0.5)
        x = rng.normal(size=(1, 4, 6))
        w = rng.normal(size=(1, 4, 6))
        params = list(bk.iter_parameters(p))
        assert param_gradcheck(lambda: nx.tsum(bk.mhsa(x, p) * w), params) <= 1e-3
        assert nx.finite_diff_gradcheck(lambda t: nx.tsum(bk.mhsa(t, p) * w), Tensor(x)) <= 1e-3


class TestFfn:
    def test_zero_weights_constant_rows(self, rng):
        p = bk.FfnParams.init(rng, "f", 4, 2)
        p.fc1.W.data[...] = 0
        p.fc2.W.data[...] = 0
        p.fc1.b.data[...] = rng.normal(size=8)
        p.fc2.b.data[...] = rng.normal(size=4)
        out = bk.ffn(rng.normal(size=(3, 4)), p).data
        assert np.array_equal(out, np.broadcast_to(p.fc2.b.data, (3, 4)))

    def test_hand_computation(self, rng):
        p = bk.FfnParams.init(rng, "f", 2, 1)
        p.fc1.W.data[...] = np.array([[1.0, 0.0], [0.0, 2.0]])
        p.fc1.b.data[...] = 0
        p.fc2.W.data[...] = np.eye(2)
        p.fc2.b.data[...] = [0.5, 0.0]
        x = np.array([[1.0, -0.5]])
        gelu = lambda v: 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))
        out = bk.ffn(x, p).data
        np.testing.assert_allclose(out[0], [gelu(1.0) + 0.5, gelu(-1.0)], atol=1e-15)

    def test_gradcheck(self, rng):
        p = bk.FfnParams.init(rng, "f", 3, 2)
        for q in bk.iter_parameters(p):
            q.data[...] = rng.normal(size=q.shape)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 3))
        assert param_gradcheck(lambda: nx.tsum(bk.ffn(x, p) * w), list(bk.iter_parameters(p))) <= 1e-3


def _vit(rng, c=6, heads=2, ls=0.5):
    p = bk.ViTBlockParams.init(rng, "v", c, heads)
    for q in bk.iter_parameters(p):
        q.data[...] = rng.normal(scale=0.5, size=q.shape)
    p.ls1.gamma.data[...] = ls
    p.ls2.gamma.data[...] = ls
    return p


class TestVitBlock:
    def test_zero_layerscale_identity(self, rng):
        p = _vit(rng, ls=0.0)
        x = rng.normal(size=(2, 5, 6))
        assert bk.vit_block(x, p).data.tobytes() == x.tobytes()

    def test_single_token_hand_evaluation(self, rng):
        p = _vit(rng, c=4, heads=2, ls=0.3)
        x = rng.normal(size=(1, 1, 4))

        def ln(v, np_):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-6) * np_.gamma.data + np_.beta.data

        def gelu(v):
            return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)))

        t = x[0]
        h = ln(t, p.norm1)
        # a single token attends only to itself
        attn = (h @ p.attn.v.W.data + p.attn.v.b.data) @ p.attn.out.W.data + p.attn.out.b.data
        t = t + attn * p.ls1.gamma.data
        h = ln(t, p.norm2)
        f = gelu(h @ p.ffn.fc1.W.data + p.ffn.fc1.b.data) @ p.ffn.fc2.W.data + p.ffn.fc2.b.data
        t = t + f * p.ls2.gamma.data
        assert np.abs(bk.vit_block(x, p).data[0] - t).max() <= 1e-10

    def test_gradcheck(self, rng):
        p = _vit(rng)
        x = rng.normal(size=(1, 3, 6))
        w = rng.normal(size=(1, 3, 6))
        params = list(bk.iter_parameters(p))
        assert param_gradcheck(lambda: nx.tsum(bk.vit_block(x, p) * w), params, per_param=4) <= 1e-3
        assert nx.finite_diff_gradcheck(lambda t: nx.tsum(bk.vit_block(t, p) * w), Tensor(x)) <= 1e-3


def test_init_statistics(rng):
    p = bk.ViTBlockParams.init(rng, "v", 64, 6)
    w = p.attn.q.W.data
    assert np.abs(w).max() <= 2 * bk.INIT_STD
    assert 0.7 * bk.INIT_STD < w.std() < 1.0 * bk.INIT_STD
    assert np.all(p.ls1.gamma.data == bk.LAYERSCALE_INIT)
    assert np.all(p.attn.q.b.data == 0)


def test_iter_parameters_unique_names(rng):
    names = [q.name for q in bk.iter_parameters(bk.ViTBlockParams.init(rng, "v", 8, 2))]
    assert len(names) == len(set(names)) == 18
