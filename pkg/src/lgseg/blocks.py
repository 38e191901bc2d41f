"""Transformer building blocks over ``[B, N, C]`` token tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

LAYERSCALE_INIT = 1e-4
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class LinearParams:
    W: Parameter
    b: Parameter

    @classmethod
    def init(cls, rng, name: str, d_in: int, d_out: int) -> "LinearParams":
        return cls(Parameter(f"{name}.W", trunc_normal(rng, (d_in, d_out))),
                   Parameter(f"{name}.b", np.zeros(d_out)))


@dataclass
class NormParams:
    gamma: Parameter
    beta: Parameter

    @classmethod
    def init(cls, name: str, c: int) -> "NormParams":
        return cls(Parameter(f"{name}.gamma", np.ones(c)), Parameter(f"{name}.beta", np.zeros(c)))


@dataclass
class MhsaParams:
    """Attention projections. q/k/v map ``c -> heads*head_dim``; ``out`` maps back to ``c``."""

    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    heads: int
    head_dim: int

    @classmethod
    def init(cls, rng, name: str, c: int, heads: int, kv_dim: int | None = None,
             head_dim: int | None = None) -> "MhsaParams":
        kv_dim = c if kv_dim is None else kv_dim
        head_dim = head_dim or max(1, c // heads)
        inner = heads * head_dim
        return cls(LinearParams.init(rng, f"{name}.q", c, inner),
                   LinearParams.init(rng, f"{name}.k", kv_dim, inner),
                   LinearParams.init(rng, f"{name}.v", kv_dim, inner),
                   LinearParams.init(rng, f"{name}.out", inner, c),
                   heads, head_dim)


@dataclass
class FfnParams:
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(cls, rng, name: str, c: int, ratio: int = 4) -> "FfnParams":
        return cls(LinearParams.init(rng, f"{name}.fc1", c, c * ratio),
                   LinearParams.init(rng, f"{name}.fc2", c * ratio, c))


@dataclass
class LayerScaleParams:
    gamma: Parameter

    @classmethod
    def init(cls, name: str, c: int, value: float = LAYERSCALE_INIT) -> "LayerScaleParams":
        return cls(Parameter(f"{name}.gamma", np.full(c, value)))


@dataclass
class ViTBlockParams:
    norm1: NormParams
    attn: MhsaParams
    ls1: LayerScaleParams
    norm2: NormParams
    ffn: FfnParams
    ls2: LayerScaleParams

    @classmethod
    def init(cls, rng, name: str, c: int, heads: int, ratio: int = 4) -> "ViTBlockParams":
        return cls(NormParams.init(f"{name}.norm1", c),
                   MhsaParams.init(rng, f"{name}.attn", c, heads),
                   LayerScaleParams.init(f"{name}.ls1", c),
                   NormParams.init(f"{name}.norm2", c),
                   FfnParams.init(rng, f"{name}.ffn", c, ratio),
                   LayerScaleParams.init(f"{name}.ls2", c))


def iter_parameters(obj) -> Iterator[Parameter]:
    """All Parameters inside nested dataclasses / lists / dicts, in field order."""
    if isinstance(obj, Parameter):
        yield obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from iter_parameters(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_parameters(item)
    elif isinstance(obj, dict):
        for item in obj.values():
            yield from iter_parameters(item)


def linear(x, p: LinearParams) -> Tensor:
    x = nx.as_tensor(x)
    if x.shape[-1] != p.W.shape[0]:
        raise nx.ShapeError(f"linear: input {x.shape} vs weight {p.W.shape}")
    return nx.matmul(x, p.W) + p.b


def norm(x, p: NormParams) -> Tensor:
    return nx.layer_norm(x, p.gamma, p.beta)


def _split_heads(x: Tensor, heads: int, d: int) -> Tensor:
    b, n, _ = x.shape
    return x.reshape(b, n, heads, d).transpose(0, 2, 1, 3)


def cross_attention(q_tokens, kv_tokens, p: MhsaParams):
    """Multi-head attention of ``q_tokens [B, Nq, C]`` over ``kv_tokens [B, Nkv, C]``.

    Returns ``(out [B, Nq, C], weights [B, heads, Nq, Nkv])``.
    """
    q_tokens, kv_tokens = nx.as_tensor(q_tokens), nx.as_tensor(kv_tokens)
    if kv_tokens.shape[1] == 0:
        raise ValueError("cross_attention: no key/value tokens")
    h, d = p.heads, p.head_dim
    b, nq, _ = q_tokens.shape
    q = _split_heads(linear(q_tokens, p.q), h, d)
    k = _split_heads(linear(kv_tokens, p.k), h, d)
    v = _split_heads(linear(kv_tokens, p.v), h, d)
    logits = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    weights = nx.softmax(logits, axis=-1)
    mixed = nx.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, nq, h * d)
    return linear(mixed, p.out), weights


def mhsa(x, p: MhsaParams) -> Tensor:
    return cross_attention(x, x, p)[0]


def ffn(x, p: FfnParams) -> Tensor:
    return linear(nx.gelu(linear(x, p.fc1)), p.fc2)


def vit_block(x, p: ViTBlockParams) -> Tensor:
    """Pre-LN block; each residual branch is scaled by its LayerScale gamma."""
    x = nx.as_tensor(x)
    x = x + mhsa(norm(x, p.norm1), p.attn) * p.ls1.gamma
    return x + ffn(norm(x, p.norm2), p.ffn) * p.ls2.gamma
