"""Pixel / superpixel / group representations and their aggregators.

Shapes (batched, channels-last):

* pixels      ``[B, ih, iw, ic]``
* superpixels ``[B, sh, sw, sc]`` with ``sh = ih / 4``
* groups      ``[B, gn, c]`` with ``gn = sh * sw / 16``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .blocks import (FfnParams, LayerScaleParams, LinearParams, MhsaParams, NormParams,
                     ViTBlockParams, cross_attention, ffn, linear, norm, trunc_normal, vit_block)
from .numerics import Parameter, Tensor

CELL = 4  # pixels per superpixel cell, per axis
GROUP_CELL = 4  # superpixels per group cell, per axis
WINDOW = 3 * CELL  # pixel extent of a superpixel's 3x3-cell neighbourhood
OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


class GeometryError(ValueError):
    pass


@dataclass
class CandidateMap:
    """Pixel <-> superpixel neighbourhood bookkeeping on an ``ih x iw`` pixel grid.

    ``cand[i, c]`` is the superpixel for candidate slot ``c`` of pixel ``i``
    (slots follow ``OFFSETS``); ``window[p, j]`` the pixel at slot ``j`` of the
    12x12 window around superpixel ``p``. ``pair[i, c]`` indexes the flattened
    ``[sn, 144]`` window layout, so ``window.ravel()[pair[i, c]] == i``.
    Invalid (clipped) slots hold index 0 and ``False`` in the validity masks.
    """

    ih: int
    iw: int
    torus: bool
    cand: np.ndarray
    cand_valid: np.ndarray
    window: np.ndarray
    window_valid: np.ndarray
    pair: np.ndarray

    @property
    def sh(self) -> int:
        return self.ih // CELL

    @property
    def sw(self) -> int:
        return self.iw // CELL

    @property
    def n_pixels(self) -> int:
        return self.ih * self.iw

    @property
    def n_superpixels(self) -> int:
        return self.sh * self.sw

    def candidates(self, y: int, x: int) -> list[int]:
        i = y * self.iw + x
        return [int(p) for p, ok in zip(self.cand[i], self.cand_valid[i]) if ok]

    def neighbourhood(self, p: int) -> set[int]:
        return {int(i) for i, ok in zip(self.window[p], self.window_valid[p]) if ok}


def build_candidate_map(ih: int, iw: int, torus: bool = False) -> CandidateMap:
    if ih % CELL or iw % CELL or ih <= 0 or iw <= 0:
        raise GeometryError(f"pixel grid {ih}x{iw} not divisible by {CELL}")
    sh, sw = ih // CELL, iw // CELL
    if torus and (sh < 3 or sw < 3):
        raise GeometryError("torus geometry needs at least 3x3 superpixels")

    ys, xs = np.divmod(np.arange(ih * iw), iw)
    cy, cx = ys // CELL, xs // CELL
    dy = np.array([o[0] for o in OFFSETS])
    dx = np.array([o[1] for o in OFFSETS])
    py = cy[:, None] + dy[None, :]
    px = cx[:, None] + dx[None, :]
    if torus:
        cand_valid = np.ones(py.shape, dtype=bool)
        py, px = py % sh, px % sw
    else:
        cand_valid = (py >= 0) & (py < sh) & (px >= 0) & (px < sw)
    cand = np.where(cand_valid, py * sw + px, 0)
    # Position of the pixel inside the candidate's window: window cell (1 - dy, 1 - dx).
    wr = (1 - dy)[None, :] * CELL + (ys % CELL)[:, None]
    wc = (1 - dx)[None, :] * CELL + (xs % CELL)[:, None]
    pair = np.where(cand_valid, cand * WINDOW * WINDOW + wr * WINDOW + wc, 0)

    pys, pxs = np.divmod(np.arange(sh * sw), sw)
    wr, wc = np.divmod(np.arange(WINDOW * WINDOW), WINDOW)
    yy = (pys[:, None] - 1) * CELL + wr[None, :]
    xx = (pxs[:, None] - 1) * CELL + wc[None, :]
    if torus:
        window_valid = np.ones(yy.shape, dtype=bool)
        yy, xx = yy % ih, xx % iw
    else:
        window_valid = (yy >= 0) & (yy < ih) & (xx >= 0) & (xx < iw)
    window = np.where(window_valid, yy * iw + xx, 0)
    return CandidateMap(ih, iw, torus, cand, cand_valid, window, window_valid, pair)


# ---------------------------------------------------------------- parameters

@dataclass
class StemStage:
    kernel: Parameter
    bias: Parameter
    norm: NormParams


@dataclass
class StemParams:
    stages: list
    kernel_size: int = 4


def init_stem(rng, name: str, stride: int, channels: int, kernel_size: int = 4) -> StemParams:
    n = int(round(math.log2(stride)))
    if 2 ** n != stride or n < 1:
        raise GeometryError(f"stem stride must be a power of two >= 2, got {stride}")
    stages, cin = [], 3
    for i in range(n):
        stages.append(StemStage(
            Parameter(f"{name}.{i}.kernel", trunc_normal(rng, (kernel_size, kernel_size, cin, channels))),
            Parameter(f"{name}.{i}.bias", np.zeros(channels)),
            NormParams.init(f"{name}.{i}.norm", channels)))
        cin = channels
    return StemParams(stages, kernel_size)


@dataclass
class ScaParams:
    norm_s: NormParams
    norm_i: NormParams
    q: LinearParams
    k: LinearParams
    v: LinearParams
    heads: int
    head_dim: int

    @classmethod
    def init(cls, rng, name: str, sc: int, ic: int, heads: int = 2) -> "ScaParams":
        if sc % heads:
            raise GeometryError(f"superpixel channels {sc} not divisible by {heads} SCA heads")
        d = sc // heads
        return cls(NormParams.init(f"{name}.norm_s", sc), NormParams.init(f"{name}.norm_i", ic),
                   LinearParams.init(rng, f"{name}.q", sc, sc),
                   LinearParams.init(rng, f"{name}.k", ic, sc),
                   LinearParams.init(rng, f"{name}.v", ic, sc), heads, d)


@dataclass
class GcaParams:
    s2g_norm_g: NormParams
    s2g_norm_s: NormParams
    s2g_attn: MhsaParams
    s2g_norm_f: NormParams
    s2g_ffn: FfnParams
    s2g_ls: LayerScaleParams
    group_block: ViTBlockParams
    g2s_norm_s: NormParams
    g2s_norm_g: NormParams
    g2s_attn: MhsaParams
    g2s_norm_f: NormParams
    g2s_ffn: FfnParams
    g2s_ls: LayerScaleParams

    @classmethod
    def init(cls, rng, name: str, c: int, heads: int = 6, ratio: int = 4) -> "GcaParams":
        return cls(NormParams.init(f"{name}.s2g.norm_g", c), NormParams.init(f"{name}.s2g.norm_s", c),
                   MhsaParams.init(rng, f"{name}.s2g.attn", c, heads),
                   NormParams.init(f"{name}.s2g.norm_f", c),
                   FfnParams.init(rng, f"{name}.s2g.ffn", c, ratio),
                   LayerScaleParams.init(f"{name}.s2g.ls", c),
                   ViTBlockParams.init(rng, f"{name}.block", c, heads, ratio),
                   NormParams.init(f"{name}.g2s.norm_s", c), NormParams.init(f"{name}.g2s.norm_g", c),
                   MhsaParams.init(rng, f"{name}.g2s.attn", c, heads),
                   NormParams.init(f"{name}.g2s.norm_f", c),
                   FfnParams.init(rng, f"{name}.g2s.ffn", c, ratio),
                   LayerScaleParams.init(f"{name}.g2s.ls", c))


# ---------------------------------------------------------------- operations

def conv_stem(image, params: StemParams, pad_mode: str = "edge") -> Tensor:
    """Stride-2 conv -> layer norm -> GELU, once per stage."""
    x = nx.as_tensor(image)
    stride = 2 ** len(params.stages)
    if x.shape[-3] % stride or x.shape[-2] % stride:
        raise GeometryError(f"image {x.shape[-3]}x{x.shape[-2]} not divisible by stem stride {stride}")
    pad = (params.kernel_size - 2) // 2
    for st in params.stages:
        x = nx.conv2d(x, st.kernel, st.bias, stride=2, pad=pad, pad_mode=pad_mode)
        x = nx.gelu(norm(x, st.norm))
    return x


def superpixel_init(pixels, proj: Optional[LinearParams] = None) -> Tensor:
    """4x4 stride-4 average pooling of pixel features, then an optional projection."""
    pixels = nx.as_tensor(pixels)
    if pixels.shape[-3] % CELL or pixels.shape[-2] % CELL:
        raise GeometryError(f"pixel grid {pixels.shape[-3]}x{pixels.shape[-2]} not divisible by {CELL}")
    s = nx.avg_pool2d(pixels, CELL, CELL)
    return s if proj is None else linear(s, proj)


def group_init(s, proj: Optional[LinearParams] = None, cell: int = GROUP_CELL) -> Tensor:
    """``cell x cell`` average pooling of the superpixel grid, flattened to ``[B, gn, c]``."""
    s = nx.as_tensor(s)
    b, sh, sw, c = s.shape
    if sh % cell or sw % cell:
        raise GeometryError(f"superpixel grid {sh}x{sw} not divisible by {cell}")
    g = nx.avg_pool2d(s, cell, cell)
    g = g.reshape(b, (sh // cell) * (sw // cell), c)
    return g if proj is None else linear(g, proj)


def sca_block(s, pixels, cmap: CandidateMap, params: ScaParams):
    """Local cross-attention of each superpixel over the pixels of its 3x3-cell window.

    Returns the updated superpixels and the raw per-head pair logits
    ``[B, heads, sn, 144]`` (scaled by 1/sqrt(head_dim), before masking).
    """
    s, pixels = nx.as_tensor(s), nx.as_tensor(pixels)
    b, sh, sw, sc = s.shape
    _, ih, iw, ic = pixels.shape
    if (ih, iw) != (cmap.ih, cmap.iw) or (sh, sw) != (cmap.sh, cmap.sw):
        raise GeometryError(f"SCA geometry mismatch: superpixels {sh}x{sw}, pixels {ih}x{iw}, "
                            f"candidate map {cmap.ih}x{cmap.iw}")
    h, d = params.heads, params.head_dim
    sn, n_win = sh * sw, WINDOW * WINDOW

    q = linear(norm(s, params.norm_s).reshape(b, sn, sc), params.q)
    q = q.reshape(b, sn, h, d).transpose(0, 2, 1, 3)  # [B, h, sn, d]
    pin = norm(pixels, params.norm_i).reshape(b, ih * iw, ic)
    k = linear(pin, params.k).reshape(b, ih * iw, h, d).transpose(0, 2, 1, 3)
    v = linear(pin, params.v).reshape(b, ih * iw, h, d).transpose(0, 2, 1, 3)

    # Dense q.k over all pixels, then gather each superpixel's window: a few large
    # GEMMs are much cheaper than per-window products on [B, h, sn, 144, d] tensors.
    n_pix = ih * iw
    win_flat = (np.arange(sn)[:, None] * n_pix + cmap.window).ravel()
    dense = nx.matmul(q, k.transpose(0, 1, 3, 2)).reshape(b, h, sn * n_pix)
    logits = nx.take(dense, win_flat, axis=2).reshape(b, h, sn, n_win) * (1.0 / math.sqrt(d))
    weights = nx.softmax(logits, axis=-1, mask=cmap.window_valid)
    w_dense = nx.scatter(weights.reshape(b, h, sn * n_win), win_flat, sn * n_pix, axis=2)
    mixed = nx.matmul(w_dense.reshape(b, h, sn, n_pix), v)  # [B, h, sn, d]
    update = mixed.reshape(b, h, sn, d).transpose(0, 2, 1, 3).reshape(b, sh, sw, h * d)
    return s + update, logits


def gca_stage(g, s, params: GcaParams):
    """S2G update of the groups, a group ViT block, then G2S update of the superpixels.

    Returns ``(groups, superpixels, g2s_weights [B, heads, sn, gn])``.
    """
    g, s = nx.as_tensor(g), nx.as_tensor(s)
    b, sh, sw, c = s.shape
    s_flat = s.reshape(b, sh * sw, c)

    a, _ = cross_attention(norm(g, params.s2g_norm_g), norm(s_flat, params.s2g_norm_s), params.s2g_attn)
    g = g + ffn(norm(a, params.s2g_norm_f), params.s2g_ffn) * params.s2g_ls.gamma
    g = vit_block(g, params.group_block)

    a, w = cross_attention(norm(s_flat, params.g2s_norm_s), norm(g, params.g2s_norm_g), params.g2s_attn)
    s_flat = s_flat + ffn(norm(a, params.g2s_norm_f), params.g2s_ffn) * params.g2s_ls.gamma
    return g, s_flat.reshape(b, sh, sw, c), w
