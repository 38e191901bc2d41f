"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (if any) whenever at
least one input requires a gradient. ``backward`` walks the tape in reverse
insertion order. Graphs are built fresh for every forward pass.

Spatial tensors are channels-last: ``[..., H, W, C]``.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An ndarray plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable tensor. ``grad`` has the value's shape after backward."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Recording tape. Use as a context manager to make it the active graph."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self._prev: Optional[Graph] = None

    def __enter__(self) -> "Graph":
        self._prev = getattr(_state, "graph", None)
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(_Node(op, tuple(inputs), output, backward))


def active_graph() -> Optional[Graph]:
    return getattr(_state, "graph", None)


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._prev = getattr(_state, "graph", None)
        _state.graph = None

    def __exit__(self, *exc):
        _state.graph = self._prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        if g.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        g.record(op, inputs, out, backward)
    return out


def custom_op(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Callable) -> Tensor:
    """Register an op defined elsewhere.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    return _result(op, data, [as_tensor(t) for t in inputs], backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result("gelu", out, (x,), backward)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; the output replaces that axis by ``idx.shape``.

    Repeated indices are allowed; the backward scatter uses a sparse matrix.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.ndim
    n_src = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n_src):
        raise IndexError(f"take: index out of range for axis of size {n_src}")
    out = np.take(x.data, idx, axis=axis)
    shape = x.shape

    def backward(g):
        flat = idx.ravel()
        gm = np.moveaxis(g.reshape(shape[:axis] + (flat.size,) + shape[axis + 1:]), axis, 0)
        rest = gm.shape[1:]
        gx = _scatter_matrix(flat, n_src) @ gm.reshape(flat.size, -1)
        return (np.moveaxis(np.asarray(gx).reshape((n_src,) + rest), 0, axis),)

    return _result("take", out, (x,), backward)


def _scatter_matrix(idx: np.ndarray, n_dst: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n_dst, idx.size))


def scatter(x, idx: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """Adjoint of :func:`take` for 1-d ``idx``: ``out[idx[j]] += x[j]`` along ``axis``.

    The output has ``size`` entries along ``axis``; repeated indices accumulate.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.ndim
    if idx.ndim != 1 or idx.size != x.shape[axis]:
        raise ShapeError(f"scatter: idx must be 1-d with {x.shape[axis]} entries, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"scatter: index out of range for output size {size}")
    xm = np.moveaxis(x.data, axis, 0)
    rest = xm.shape[1:]
    out = _scatter_matrix(idx, size) @ xm.reshape(idx.size, -1)
    out = np.moveaxis(np.asarray(out).reshape((size,) + rest), 0, axis)
    return _result("scatter", out, (x,), lambda g: (np.take(g, idx, axis=axis),))


# ---------------------------------------------------------------- linear algebra

def _blas_ready(x: np.ndarray) -> np.ndarray:
    """Copy ``x`` unless its trailing matrices are row- or column-major.

    numpy hands batched products to BLAS only in those layouts and otherwise
    falls back to a much slower loop.
    """
    if x.ndim < 2 or x.flags.c_contiguous or np.swapaxes(x, -1, -2).flags.c_contiguous:
        return x
    return np.ascontiguousarray(x)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = _blas_ready(a.data), _blas_ready(b.data)

    def backward(g):
        g = _blas_ready(g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result("matmul", ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- normalization

def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax. ``mask`` (broadcastable bool, True = keep) zeroes entries exactly."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _result("log_softmax", out, (x,),
                   lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (x, gamma, beta), backward)


def cross_entropy(logits, labels: np.ndarray, axis: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    c = logits.shape[axis]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label id out of range for {c} classes (max {labels.max()})")
    lg = np.moveaxis(logits.data, axis, -1)
    if lg.shape[:-1] != labels.shape:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    z = lg - lg.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = labels.size
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    loss = -picked.sum() / n

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (np.moveaxis(p * (g / n), -1, axis),)

    return _result("cross_entropy", np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- spatial

def _out_extent(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"{what}: extent {n} with kernel {k}, stride {stride}, pad {pad} "
                         "does not divide evenly")
    return span // stride + 1


def avg_pool2d(x, k: int, stride: Optional[int] = None) -> Tensor:
    """Mean over k×k windows of ``[..., H, W, C]``."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    h, w = x.shape[-3], x.shape[-2]
    oh = _out_extent(h, k, stride, 0, "avg_pool2d")
    ow = _out_extent(w, k, stride, 0, "avg_pool2d")
    xd = x.data
    if stride == k:
        lead = xd.shape[:-3]
        out = xd.reshape(lead + (oh, k, ow, k, xd.shape[-1])).mean(axis=(-4, -2))
    else:
        out = 0.0
        for dy in range(k):
            for dx in range(k):
                out = out + xd[..., dy:dy + stride * oh:stride, dx:dx + stride * ow:stride, :]
        out = out / (k * k)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gk = g / (k * k)
        for dy in range(k):
            for dx in range(k):
                gx[..., dy:dy + stride * oh:stride, dx:dx + stride * ow:stride, :] += gk
        return (gx,)

    return _result("avg_pool2d", out, (x,), backward)


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of ``[..., H, W, Cin]`` with a ``[kh, kw, Cin, Cout]`` kernel.

    ``pad_mode`` is ``"zero"`` or ``"edge"`` (replicate border pixels). Output is
    ``[..., Ho, Wo, Cout]``.
    """
    if pad_mode not in ("zero", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    x, kernel = as_tensor(x), as_tensor(kernel)
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    h, w = x.shape[-3], x.shape[-2]
    oh = _out_extent(h, kh, stride, pad, "conv2d")
    ow = _out_extent(w, kw, stride, pad, "conv2d")
    lead = x.shape[:-3]
    pad_width = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad), (0, 0)]
    if pad:
        xp = np.pad(x.data, pad_width, mode="constant" if pad_mode == "zero" else "edge")
    else:
        xp = x.data
    kd = kernel.data
    # Columns [..., oh, ow, kh, kw, cin]
    cols = np.empty(lead + (oh, ow, kh, kw, cin))
    for dy in range(kh):
        for dx in range(kw):
            cols[..., dy, dx, :] = xp[..., dy:dy + stride * oh:stride, dx:dx + stride * ow:stride, :]
    flat = cols.reshape(-1, kh * kw * cin)
    out = (flat @ kd.reshape(-1, cout)).reshape(lead + (oh, ow, cout))
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)
    xshape, pshape = x.shape, xp.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (flat.T @ g2).reshape(kd.shape)
        gcols = (g2 @ kd.reshape(-1, cout).T).reshape(lead + (oh, ow, kh, kw, cin))
        gxp = np.zeros(pshape)
        for dy in range(kh):
            for dx in range(kw):
                gxp[..., dy:dy + stride * oh:stride, dx:dx + stride * ow:stride, :] += gcols[..., dy, dx, :]
        if pad and pad_mode == "edge":
            gxp[..., pad, :, :] += gxp[..., :pad, :, :].sum(axis=-3)
            gxp[..., pad + h - 1, :, :] += gxp[..., pad + h:, :, :].sum(axis=-3)
            gxp[..., :, pad, :] += gxp[..., :, :pad, :].sum(axis=-2)
            gxp[..., :, pad + w - 1, :] += gxp[..., :, pad + w:, :].sum(axis=-2)
        gx = gxp[..., pad:pad + h, pad:pad + w, :] if pad else gxp
        grads = [gx.reshape(xshape), gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result("conv2d", out, inputs, backward)


# ---------------------------------------------------------------- backward & checks

def backward(graph: Graph, loss: Tensor, params: Iterable[Parameter] = ()) -> None:
    """Reverse-mode accumulation from a scalar ``loss``.

    Every tensor reachable from the loss receives ``.grad``; each parameter in
    ``params`` that the loss does not touch gets a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = None
    for node in graph.nodes:
        node.output.grad = None
    for node in graph.nodes:
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    if loss.node_id is None or graph.nodes[loss.node_id].output is not loss:
        # Loss was not produced on this graph (e.g. a constant): nothing flows.
        for p in params:
            if p.grad is None:
                p.zero_grad()
        return
    for node in reversed(graph.nodes[:loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.asarray(gt, dtype=DTYPE).reshape(t.shape)
            else:
                t.grad = t.grad + gt
    for p in params:
        if p.grad is None:
            p.zero_grad()


def _noise_floor(loss: Tensor, h: float, floor: float) -> float:
    return max(floor, 1e4 * abs(float(loss.data)) * np.finfo(np.float64).eps / h)


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                          max_entries: Optional[int] = None, seed: int = 0,
                          floor: float = 1e-7) -> float:
    """Largest relative discrepancy between backward() and central differences.

    The relative error per entry is ``|a - n| / max(|a|, |n|, floor')`` where
    ``floor'`` also covers the round-off of a central difference,
    ``|loss| * eps / h``, scaled by 1e4 (about ten ulps of cancellation) so
    exact-zero gradients (e.g. a key bias under softmax shift invariance) are
    not reported as relative failures.
    With ``max_entries`` only a random subset of coordinates is probed.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    with Graph() as g:
        loss = f(x)
    backward(g, loss)
    floor = _noise_floor(loss, h, floor)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        coords = np.random.default_rng(seed).choice(flat.size, max_entries, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def grad_max_abs_error(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Absolute-error variant of :func:`finite_diff_gradcheck` (for near-zero gradients)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    with Graph() as g:
        loss = f(x)
    backward(g, loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            worst = max(worst, abs(analytic.reshape(-1)[i] - (fp - fm) / (2 * h)))
    return worst


def param_gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
                    per_param: int = 6, seed: int = 0, floor: float = 1e-7) -> float:
    """Finite-difference check over a sample of entries of every parameter."""
    with Graph() as g:
        loss = loss_fn()
    backward(g, loss, params)
    floor = _noise_floor(loss, h, floor)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ga = p.grad.reshape(-1).copy()
            n = min(per_param, flat.size)
            for i in rng.choice(flat.size, n, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor))
    return worst
