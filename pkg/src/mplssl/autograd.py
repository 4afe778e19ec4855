"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the op that produced it only when at least one input
requires a gradient, so subgraphs built purely from frozen tensors cost nothing
on the backward pass. Matrix-product style ops report their multiply-accumulate
counts to :data:`STATS`, which is how forward and backward arithmetic cost is
measured.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidInputError


STATS = {"forward_macs": 0, "backward_macs": 0}


@contextlib.contextmanager
def count_macs():
    """Reset the MAC counters, yield them, leave the totals in place."""
    STATS["forward_macs"] = 0
    STATS["backward_macs"] = 0
    yield STATS


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, (np.ndarray, int, float)) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return np.shape(self.data)

    @property
    def ndim(self):
        return np.ndim(self.data)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def _const(x):
    """Wrap a non-tensor operand; python scalars stay weakly typed."""
    if isinstance(x, (int, float, np.number)):
        return Tensor(float(x))
    return Tensor(np.asarray(x))


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a)
    b = b if isinstance(b, Tensor) else _const(b)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a)
    b = b if isinstance(b, Tensor) else _const(b)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a)
    b = b if isinstance(b, Tensor) else _const(b)

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_A * xd * xd * xd))

    def bw(g):
        d = 1.0 - t * t
        d *= xd
        d *= (1.5 * _GELU_A * _GELU_C) * (xd * xd) + 0.5 * _GELU_C
        d += 0.5
        d += 0.5 * t
        d *= g
        return (d,)

    return _make(0.5 * xd * (1.0 + t), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _unique_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if isinstance(p, np.ndarray) and p.dtype != bool:
            return False
        if isinstance(p, (list, tuple)):
            return False
    return True


def getitem(x: Tensor, index) -> Tensor:
    scatter = _unique_index(index)

    def bw(g):
        out = np.zeros_like(x.data)
        if scatter:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) if x.requires_grad else None for i, x in enumerate(xs))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw)


def pad_last(x: Tensor, left: int, right: int) -> Tensor:
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _make(np.pad(x.data, width), (x,), lambda g: (g[..., left:left + n],))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def where_rows(x: Tensor, mask: np.ndarray, fill: Tensor) -> Tensor:
    """Replace ``x[..., i, :]`` by ``fill`` wherever ``mask[..., i]`` is set."""
    m = mask[..., None]

    def bw(g):
        gx = np.where(m, 0, g) if x.requires_grad else None
        gf = g[mask].sum(axis=0) if fill.requires_grad else None
        return gx, gf

    return _make(np.where(m, fill.data, x.data), (x, fill), bw)


# -- products -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = np.matmul(a.data, b.data)
    macs = y.size * a.shape[-1]
    STATS["forward_macs"] += macs

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            STATS["backward_macs"] += macs
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            STATS["backward_macs"] += macs
        return ga, gb

    return _make(y, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    y = np.matmul(x.data, weight.data.T)
    if bias is not None:
        y += bias.data
    macs = y.size * x.shape[-1]
    STATS["forward_macs"] += macs
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(g, weight.data)
            STATS["backward_macs"] += macs
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
            STATS["backward_macs"] += macs
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(y, parents, bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0, groups: int = 1) -> Tensor:
    """Grouped 1-D convolution; ``x`` is (B, C_in, L), ``weight`` (C_out, C_in/groups, K)."""
    pl, pr = (padding, padding) if np.isscalar(padding) else padding
    xd = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    xd = np.ascontiguousarray(xd)
    bsz, cin, length = xd.shape
    cout, cg, k = weight.shape
    if cin != cg * groups or cout % groups:
        raise InvalidInputError(f"conv1d channel mismatch: in={cin}, weight={weight.shape}, groups={groups}")
    lout = (length - k) // stride + 1
    if lout < 1:
        raise InvalidInputError(f"input length {length} too short for kernel {k}")
    og = cout // groups
    sb, sc, sl = xd.strides
    cols = as_strided(xd, (bsz, groups, lout, cg, k), (sb, sc * cg, sl * stride, sc, sl))
    cols = cols.reshape(bsz, groups, lout, cg * k)  # copies
    wg = weight.data.reshape(groups, og, cg * k)
    y = np.matmul(cols, wg.transpose(0, 2, 1))  # (B, G, Lout, og)
    y = y.transpose(0, 1, 3, 2).reshape(bsz, cout, lout)
    if bias is not None:
        y = y + bias.data[None, :, None]
    macs = bsz * lout * cout * cg * k
    STATS["forward_macs"] += macs
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        gy = g.reshape(bsz, groups, og, lout).transpose(0, 1, 3, 2)  # (B, G, Lout, og)
        if weight.requires_grad:
            a = cols.transpose(1, 3, 0, 2).reshape(groups, cg * k, bsz * lout)
            b = gy.transpose(1, 0, 2, 3).reshape(groups, bsz * lout, og)
            gw = np.matmul(a, b).transpose(0, 2, 1).reshape(weight.shape)
            STATS["backward_macs"] += macs
        if x.requires_grad:
            gcols = np.matmul(gy, wg).reshape(bsz, groups, lout, cg, k)
            gcols = gcols.transpose(0, 1, 3, 4, 2).reshape(bsz, cin, k, lout)
            gxp = np.zeros_like(xd)
            span = stride * (lout - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, j]
            gx = gxp[:, :, pl:pl + x.shape[2]]
            STATS["backward_macs"] += macs
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(y, parents, bw)


# -- normalisation and softmax ------------------------------------------------

def normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along the last axis (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return add(mul(normalize(x, eps), gain), bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def _unit_rows(v: np.ndarray):
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    return np.where(norm > 0, v / safe, 0), norm, safe


def cosine_logits(u: Tensor, emb: Tensor, tau: float) -> Tensor:
    """``cos(u_i, e_c) / tau`` for every row of ``u`` (..., P) and ``emb`` (K, P).

    Cosine similarity with a zero vector is defined as 0.
    """
    uh, un, us = _unit_rows(u.data)
    eh, en, es = _unit_rows(emb.data)
    y = np.matmul(uh, eh.T) / tau
    macs = y.size * u.shape[-1]
    STATS["forward_macs"] += macs

    def bw(g):
        gu = ge = None
        if u.requires_grad:
            guh = np.matmul(g, eh) / tau
            STATS["backward_macs"] += macs
            gu = np.where(un > 0, (guh - uh * (guh * uh).sum(axis=-1, keepdims=True)) / us, 0)
        if emb.requires_grad:
            geh = np.matmul(g.reshape(-1, g.shape[-1]).T, uh.reshape(-1, uh.shape[-1])) / tau
            STATS["backward_macs"] += macs
            ge = np.where(en > 0, (geh - eh * (geh * eh).sum(axis=-1, keepdims=True)) / es, 0)
        return gu, ge

    return _make(y, (u, emb), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"label outside [0, {k})")
    flat = logits.data.reshape(-1, k)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = lse - z[rows, labels.ravel()]
    scale = 1.0 / max(1, nll.size) if reduction == "mean" else 1.0

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels.ravel()] -= 1.0
        return ((g * scale * p).reshape(logits.shape),)

    return _make(np.asarray(nll.sum() * scale, dtype=logits.dtype), (logits,), bw)
