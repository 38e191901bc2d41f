"""Association matrices between hierarchy levels and the upsampling built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .hierarchy import CandidateMap
from .numerics import Tensor


@dataclass
class AssocPixSp:
    """Sparse row-stochastic pixel -> superpixel weights.

    ``weights`` is ``[B, n_pixels, 9]`` aligned with ``cmap.cand``; clipped
    candidate slots carry exactly zero weight.
    """

    cmap: CandidateMap
    weights: Tensor

    def dense(self) -> np.ndarray:
        """Materialize ``[B, n_pixels, n_superpixels]``."""
        w = self.weights.data
        out = np.zeros((w.shape[0], self.cmap.n_pixels, self.cmap.n_superpixels))
        rows = np.broadcast_to(np.arange(self.cmap.n_pixels)[:, None], self.cmap.cand.shape)
        for bi in range(w.shape[0]):
            np.add.at(out[bi], (rows, self.cmap.cand), np.where(self.cmap.cand_valid, w[bi], 0.0))
        return out


@dataclass
class AssocSpGroup:
    """Dense row-stochastic superpixel -> group weights ``[B, sn, gn]``."""

    weights: Tensor

    def dense(self) -> np.ndarray:
        return self.weights.data


def pix_sp_assoc(sca_logits, cmap: CandidateMap) -> AssocPixSp:
    """Average pair logits over heads, then softmax per pixel over its candidates."""
    sca_logits = nx.as_tensor(sca_logits)
    b, h, sn, n_win = sca_logits.shape
    if sn * n_win != cmap.n_superpixels * 144:
        raise ValueError(f"logits {sca_logits.shape} do not cover the candidate map pairs")
    if not cmap.cand_valid.any(axis=1).all():
        raise ValueError("a pixel has no candidate superpixels")
    flat = nx.mean(sca_logits, axis=1).reshape(b, sn * n_win)
    per_pixel = nx.take(flat, cmap.pair, axis=1)  # [B, n_pixels, 9]
    return AssocPixSp(cmap, nx.softmax(per_pixel, axis=-1, mask=cmap.cand_valid))


def sp_group_assoc(g2s_weights) -> AssocSpGroup:
    """Mean over heads of per-head G2S attention ``[B, heads, sn, gn]``."""
    return AssocSpGroup(nx.mean(nx.as_tensor(g2s_weights), axis=1))


def upsample_group_to_sp(o_g, a: AssocSpGroup, sh: int, sw: int) -> Tensor:
    """``O_S = A_sg @ O_G`` reshaped onto the superpixel grid."""
    o_g = nx.as_tensor(o_g)
    b, sn, gn = a.weights.shape
    if o_g.shape[1] != gn or sn != sh * sw:
        raise nx.ShapeError(f"group predictions {o_g.shape} vs association {a.weights.shape} "
                            f"on a {sh}x{sw} grid")
    return nx.matmul(a.weights, o_g).reshape(b, sh, sw, o_g.shape[-1])


def upsample_sp_to_pix(o_s, a: AssocPixSp) -> Tensor:
    """``O_I[i] = sum_c A[i, c] * O_S[cand[i, c]]`` on the pixel grid."""
    o_s = nx.as_tensor(o_s)
    cm = a.cmap
    b, sh, sw, oc = o_s.shape
    if (sh, sw) != (cm.sh, cm.sw):
        raise nx.ShapeError(f"superpixel map {sh}x{sw} vs candidate map {cm.sh}x{cm.sw}")
    gathered = nx.take(o_s.reshape(b, sh * sw, oc), cm.cand, axis=1)  # [B, n_pix, 9, oc]
    w = a.weights.reshape(b, cm.n_pixels, 9, 1)
    return nx.tsum(gathered * w, axis=2).reshape(b, cm.ih, cm.iw, oc)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation weights, half-pixel centres (align_corners=False)."""
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"bilinear sizes must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize ``[..., h, w, c]`` to ``[..., out_h, out_w, c]``."""
    x = nx.as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    data = np.einsum("oh,...hwc,pw->...opc", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,...opc,pw->...hwc", ry, g, rx, optimize=True),)

    return nx.custom_op("bilinear_resize", (x,), data, backward)
