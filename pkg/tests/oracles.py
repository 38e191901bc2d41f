"""Plain-numpy reference implementations used as independent test oracles."""

import math

import numpy as np


def ln(x, p, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p.gamma.data + p.beta.data


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def lin(x, p):
    return x @ p.W.data + p.b.data


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def attention(xq, xkv, p):
    """``(out, weights[h, nq, nkv])`` for unbatched token matrices."""
    h, d = p.heads, p.head_dim
    q, k, v = lin(xq, p.q), lin(xkv, p.k), lin(xkv, p.v)
    outs, ws = [], []
    for i in range(h):
        sl = slice(i * d, (i + 1) * d)
        w = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(d))
        ws.append(w)
        outs.append(w @ v[:, sl])
    return lin(np.concatenate(outs, -1), p.out), np.stack(ws)


def ffn(x, p):
    return lin(gelu(lin(x, p.fc1)), p.fc2)


def vit(x, p):
    x = x + attention(ln(x, p.norm1), ln(x, p.norm1), p.attn)[0] * p.ls1.gamma.data
    return x + ffn(ln(x, p.norm2), p.ffn) * p.ls2.gamma.data


def gca(g, s, p):
    """Unbatched GCA stage: g [gn, c], s [sn, c]."""
    a, _ = attention(ln(g, p.s2g_norm_g), ln(s, p.s2g_norm_s), p.s2g_attn)
    g = g + ffn(ln(a, p.s2g_norm_f), p.s2g_ffn) * p.s2g_ls.gamma.data
    g = vit(g, p.group_block)
    a, w = attention(ln(s, p.g2s_norm_s), ln(g, p.g2s_norm_g), p.g2s_attn)
    s = s + ffn(ln(a, p.g2s_norm_f), p.g2s_ffn) * p.g2s_ls.gamma.data
    return g, s, w


def neighbourhood_pixels(sy, sx, ih, iw, cell=4, torus=False):
    """Pixel coordinates of the 3x3-cell window around superpixel (sy, sx), by brute force."""
    out = []
    for y in range((sy - 1) * cell, (sy + 2) * cell):
        for x in range((sx - 1) * cell, (sx + 2) * cell):
            if torus:
                out.append((y % ih, x % iw))
            elif 0 <= y < ih and 0 <= x < iw:
                out.append((y, x))
    return out


def sca(s, pixels, p, torus=False, cell=4):
    """Unbatched SCA by explicit loops over superpixels: s [sh, sw, c], pixels [ih, iw, ic]."""
    sh, sw, _ = s.shape
    ih, iw, _ = pixels.shape
    h, d = p.heads, p.head_dim
    q = lin(ln(s, p.norm_s), p.q)
    pin = ln(pixels, p.norm_i)
    k, v = lin(pin, p.k), lin(pin, p.v)
    out = s.copy()
    for sy in range(sh):
        for sx in range(sw):
            nb = neighbourhood_pixels(sy, sx, ih, iw, cell, torus)
            kk = np.stack([k[y, x] for y, x in nb])
            vv = np.stack([v[y, x] for y, x in nb])
            for i in range(h):
                sl = slice(i * d, (i + 1) * d)
                w = softmax(kk[:, sl] @ q[sy, sx, sl] / math.sqrt(d))
                out[sy, sx, sl] += w @ vv[:, sl]
    return out


def randomize(params, rng, scale=0.5):
    from lgseg.blocks import iter_parameters

    for q in iter_parameters(params):
        q.data[...] = rng.normal(scale=scale, size=q.shape)
    return params
