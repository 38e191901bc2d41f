import math

import numpy as np
import pytest

import oracles as orc
from lgseg import hierarchy as hr
from lgseg import numerics as nx
from lgseg.blocks import LinearParams, iter_parameters
from lgseg.numerics import Tensor, param_gradcheck


def direct_conv(x, k, b, stride, pad):
    """Stride/pad convolution by explicit window sums over an edge-padded image."""
    h, w, _ = x.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    kh = k.shape[0]
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kh) // stride + 1
    out = np.empty((oh, ow, k.shape[-1]))
    for y in range(oh):
        for xx in range(ow):
            patch = xp[y * stride:y * stride + kh, xx * stride:xx * stride + kh]
            out[y, xx] = np.tensordot(patch, k, axes=3) + b
    return out


class TestCandidateMap:
    def test_interior_has_nine(self):
        cm = hr.build_candidate_map(16, 16)
        assert len(cm.candidates(6, 7)) == 9

    def test_corner_has_four(self):
        cm = hr.build_candidate_map(16, 16)
        assert sorted(cm.candidates(0, 0)) == [0, 1, 4, 5]

    def test_candidates_match_definition(self):
        cm = hr.build_candidate_map(16, 12)
        for y in range(16):
            for x in range(12):
                exp = {(y // 4 + dy) * 3 + (x // 4 + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                       if 0 <= y // 4 + dy < 4 and 0 <= x // 4 + dx < 3}
                assert set(cm.candidates(y, x)) == exp

    def test_duality_exhaustive(self):
        cm = hr.build_candidate_map(16, 16)
        for p in range(cm.n_superpixels):
            nb = cm.neighbourhood(p)
            for i in range(cm.n_pixels):
                assert (i in nb) == (p in cm.candidates(*divmod(i, 16)))

    def test_pair_index_points_back(self):
        cm = hr.build_candidate_map(16, 16)
        flat = cm.window.ravel()
        i = np.broadcast_to(np.arange(cm.n_pixels)[:, None], cm.pair.shape)
        assert np.array_equal(flat[cm.pair][cm.cand_valid], i[cm.cand_valid])
        assert cm.window_valid.ravel()[cm.pair][cm.cand_valid].all()

    def test_torus_all_valid(self):
        cm = hr.build_candidate_map(16, 16, torus=True)
        assert cm.cand_valid.all() and cm.window_valid.all()
        assert sorted(cm.candidates(0, 0)) == sorted([15, 12, 13, 3, 0, 1, 7, 4, 5])

    def test_bad_geometry(self):
        with pytest.raises(hr.GeometryError):
            hr.build_candidate_map(10, 16)


class TestStem:
    def test_shape(self, rng):
        st = hr.init_stem(rng, "stem", 2, 8)
        assert hr.conv_stem(rng.uniform(size=(1, 64, 64, 3)), st).shape == (1, 32, 32, 8)

    def test_stride_four_two_stages(self, rng):
        st = hr.init_stem(rng, "stem", 4, 8)
        assert len(st.stages) == 2
        assert hr.conv_stem(rng.uniform(size=(1, 16, 16, 3)), st).shape == (1, 4, 4, 8)

    def test_constant_image_constant_features(self, rng):
        st = hr.init_stem(rng, "stem", 2, 5)
        st.stages[0].kernel.data[...] = 1.0
        out = hr.conv_stem(np.full((1, 16, 16, 3), 0.4), st).data
        assert np.abs(out - out[0, 0, 0]).max() <= 1e-12

    def test_direct_conv_oracle(self, rng):
        st = orc.randomize(hr.init_stem(rng, "stem", 2, 4), rng)
        img = rng.uniform(size=(1, 8, 8, 3))
        s0 = st.stages[0]
        ref = orc.gelu(orc.ln(direct_conv(img[0], s0.kernel.data, s0.bias.data, 2, 1), s0.norm))
        assert np.abs(hr.conv_stem(img, st).data[0] - ref).max() <= 1e-10

    def test_non_divisible(self, rng):
        with pytest.raises(hr.GeometryError):
            hr.conv_stem(np.zeros((1, 10, 10, 3)), hr.init_stem(rng, "stem", 4, 4))

    def test_bad_stride(self, rng):
        with pytest.raises(hr.GeometryError):
            hr.init_stem(rng, "stem", 3, 4)


class TestInit:
    def test_superpixel_constant(self, rng):
        proj = orc.randomize(LinearParams.init(rng, "p", 4, 6), rng)
        out = hr.superpixel_init(np.full((1, 32, 32, 4), 0.7), proj).data
        assert out.shape == (1, 8, 8, 6)
        assert np.abs(out - out[0, 0, 0]).max() <= 1e-12

    def test_superpixel_pool_oracle(self, rng):
        x = rng.normal(size=(1, 8, 12, 3))
        ref = x[0].reshape(2, 4, 3, 4, 3).mean(axis=(1, 3))
        assert np.abs(hr.superpixel_init(x).data[0] - ref).max() <= 1e-12

    @pytest.mark.parametrize("side,groups", [(8, 4), (32, 64)])
    def test_group_counts(self, rng, side, groups):
        assert hr.group_init(rng.normal(size=(1, side, side, 2))).shape == (1, groups, 2)

    def test_group_constant(self):
        out = hr.group_init(np.full((1, 8, 8, 3), -1.5)).data
        assert np.all(out == -1.5)

    def test_group_bad_geometry(self):
        with pytest.raises(hr.GeometryError):
            hr.group_init(np.zeros((1, 6, 8, 2)))


def _sca_params(rng, sc=8, ic=6, heads=2, scale=0.5):
    return orc.randomize(hr.ScaParams.init(rng, "sca", sc, ic, heads), rng, scale)


class TestSca:
    def test_matches_loop_oracle(self, rng):
        p = _sca_params(rng)
        s, pix = rng.normal(size=(1, 4, 3, 8)), rng.normal(size=(1, 16, 12, 6))
        out, _ = hr.sca_block(s, pix, hr.build_candidate_map(16, 12), p)
        assert np.abs(out.data[0] - orc.sca(s[0], pix[0], p)).max() <= 1e-10

    def test_zero_qk_is_neighbourhood_mean(self, rng):
        p = _sca_params(rng)
        for lin in (p.q, p.k):
            lin.W.data[...] = 0
            lin.b.data[...] = 0
        s, pix = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 16, 16, 6))
        out, _ = hr.sca_block(s, pix, hr.build_candidate_map(16, 16), p)
        v = orc.lin(orc.ln(pix[0], p.norm_i), p.v)
        ref = s[0].copy()
        for sy in range(4):
            for sx in range(4):
                nb = orc.neighbourhood_pixels(sy, sx, 16, 16)
                ref[sy, sx] += np.mean([v[y, x] for y, x in nb], axis=0)
        assert np.abs(out.data[0] - ref).max() <= 1e-10

    def test_zero_value_path_leaves_s(self, rng):
        p = _sca_params(rng)
        p.v.W.data[...] = 0
        p.v.b.data[...] = 0
        s = rng.normal(size=(1, 2, 2, 8))
        out, _ = hr.sca_block(s, rng.normal(size=(1, 8, 8, 6)), hr.build_candidate_map(8, 8), p)
        assert np.array_equal(out.data, s)

    def test_single_superpixel_hand_case(self, rng):
        p = hr.ScaParams.init(rng, "sca", 2, 2, heads=1)
        p.q.W.data[...] = np.eye(2)
        p.k.W.data[...] = np.eye(2)
        p.v.W.data[...] = np.eye(2)
        s = np.array([[[[1.0, -1.0]]]])
        pix = rng.normal(size=(1, 4, 4, 2))
        out, logits = hr.sca_block(s, pix, hr.build_candidate_map(4, 4), p)
        # 2-channel layer norm maps (a, b) to sign(a - b) * (1, -1) up to eps
        def ln2(x):
            dlt = (x[..., 0] - x[..., 1]) / 2
            r = dlt / np.sqrt(dlt ** 2 + 1e-6)
            return np.stack([r, -r], -1)
        qv = ln2(s[0, 0, 0])
        kv = ln2(pix[0]).reshape(16, 2)
        w = np.exp(kv @ qv / math.sqrt(2))
        w /= w.sum()
        assert np.abs(out.data[0, 0, 0] - (s[0, 0, 0] + w @ kv)).max() <= 1e-10
        assert logits.shape == (1, 1, 1, 144)

    def test_weights_sum_to_one(self, rng):
        p = _sca_params(rng, scale=2.0)
        cm = hr.build_candidate_map(16, 16)
        _, logits = hr.sca_block(rng.normal(size=(2, 4, 4, 8)), rng.normal(size=(2, 16, 16, 6)), cm, p)
        w = nx.softmax(logits, axis=-1, mask=cm.window_valid).data
        assert np.abs(w.sum(-1) - 1).max() <= 1e-12
        assert np.all(w[..., ~cm.window_valid] == 0)

    def test_torus_translation_equivariance(self, rng):
        p = _sca_params(rng)
        cm = hr.build_candidate_map(16, 16, torus=True)
        s, pix = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 16, 16, 6))
        out1, _ = hr.sca_block(s, pix, cm, p)
        out2, _ = hr.sca_block(np.roll(s, (1, 1), axis=(1, 2)), np.roll(pix, (4, 4), axis=(1, 2)), cm, p)
        assert np.abs(np.roll(out1.data, (1, 1), axis=(1, 2)) - out2.data).max() <= 1e-10

    def test_geometry_mismatch(self, rng):
        with pytest.raises(hr.GeometryError):
            hr.sca_block(np.zeros((1, 2, 2, 8)), np.zeros((1, 16, 16, 6)), hr.build_candidate_map(16, 16),
                         _sca_params(rng))

    def test_heads_must_divide(self, rng):
        with pytest.raises(hr.GeometryError):
            hr.ScaParams.init(rng, "sca", 9, 4, heads=2)

    def test_gradcheck(self, rng):
        p = _sca_params(rng, sc=4, ic=3)
        cm = hr.build_candidate_map(8, 8)
        s, pix = rng.normal(size=(1, 2, 2, 4)), rng.normal(size=(1, 8, 8, 3))
        w = rng.normal(size=(1, 2, 2, 4))
        wl = rng.normal(size=(1, 2, 4, 144))
        loss = lambda: _sca_loss(s, pix, cm, p, w, wl)
        assert param_gradcheck(loss, list(iter_parameters(p)), per_param=4) <= 1e-3
        assert nx.finite_diff_gradcheck(lambda t: _sca_loss(s, t, cm, p, w, wl), Tensor(pix),
                                        max_entries=40) <= 1e-3
        assert nx.finite_diff_gradcheck(lambda t: _sca_loss(t, pix, cm, p, w, wl), Tensor(s)) <= 1e-3


def _sca_loss(s, pix, cm, p, w, wl):
    out, logits = hr.sca_block(s, pix, cm, p)
    masked = logits * cm.window_valid.reshape(1, 1, 4, 144)
    return nx.tsum(out * w) + nx.tsum(masked * wl) * 0.1


def _gca_params(rng, c=6, heads=2, ls=0.5):
    p = orc.randomize(hr.GcaParams.init(rng, "gca", c, heads), rng)
    for q in iter_parameters(p):
        if q.name.endswith(".gamma") and ".ls" in q.name:
            q.data[...] = ls
    return p


class TestGca:
    def test_identity_when_residual_branches_closed(self, rng):
        p = _gca_params(rng, ls=0.0)
        g, s = rng.normal(size=(1, 2, 6)), rng.normal(size=(1, 2, 4, 6))
        g2, s2, _ = hr.gca_stage(g, s, p)
        assert np.array_equal(g2.data, g) and np.array_equal(s2.data, s)

    def test_single_group_weights_are_one(self, rng):
        p = _gca_params(rng)
        _, _, w = hr.gca_stage(rng.normal(size=(2, 1, 6)), rng.normal(size=(2, 4, 4, 6)), p)
        assert w.shape == (2, 2, 16, 1) and np.all(w.data == 1.0)

    def test_two_superpixels_one_group_hand_eval(self, rng):
        p = _gca_params(rng, ls=0.3)
        g, s = rng.normal(size=(1, 1, 6)), rng.normal(size=(1, 1, 2, 6))
        g2, s2, w = hr.gca_stage(g, s, p)
        rg, rs, rw = orc.gca(g[0], s[0].reshape(2, 6), p)
        assert np.abs(g2.data[0] - rg).max() <= 1e-10
        assert np.abs(s2.data[0].reshape(2, 6) - rs).max() <= 1e-10
        assert np.abs(w.data[0] - rw).max() <= 1e-10

    def test_rows_sum_to_one(self, rng):
        p = _gca_params(rng)
        g, s = rng.normal(size=(1, 3, 6)), rng.normal(size=(1, 4, 4, 6))
        _, _, w = hr.gca_stage(g, s, p)
        assert np.abs(w.data.sum(-1) - 1).max() <= 1e-12
        from lgseg.blocks import cross_attention, norm
        _, ws2g = cross_attention(norm(g, p.s2g_norm_g), norm(s.reshape(1, 16, 6), p.s2g_norm_s),
                                  p.s2g_attn)
        assert np.abs(ws2g.data.sum(-1) - 1).max() <= 1e-12

    def test_gradcheck(self, rng):
        p = _gca_params(rng)
        g, s = rng.normal(size=(1, 2, 6)), rng.normal(size=(1, 2, 2, 6))
        wg, ws, ww = rng.normal(size=(1, 2, 6)), rng.normal(size=(1, 2, 2, 6)), rng.normal(size=(1, 2, 4, 2))

        def loss():
            g2, s2, w = hr.gca_stage(g, s, p)
            return nx.tsum(g2 * wg) + nx.tsum(s2 * ws) + nx.tsum(w * ww)

        assert param_gradcheck(loss, list(iter_parameters(p)), per_param=3) <= 1e-3
