"""Minimal reverse-mode autodiff over numpy arrays.

A ``Var`` wraps an array. Operations build a graph only when grad mode is on and
at least one input requires a gradient; otherwise they are plain numpy calls, so
the same model code serves training and inference.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Var], fn) -> Var:
    out = Var(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Var, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if grad is None:
        if root.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {root.data.shape}")
        grad = np.ones_like(root.data)
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Var, s: float) -> Var:
    s = np.asarray(s, dtype=a.data.dtype)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _make(tc.matmul(ad, bd), (a, b), bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """x @ w.T (+ b) with ``w`` stored as [out_features, in_features]."""
    xd, wd = x.data, w.data
    y = np.matmul(xd, wd.T)
    if b is not None:
        y = y + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, wd) if x.requires_grad else None
        gw = np.matmul(g2.T, xd.reshape(-1, xd.shape[-1])) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw)


def sum_all(a: Var) -> Var:
    shape = a.data.shape
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var, axis: int) -> Var:
    n = a.data.shape[axis]
    shape = a.data.shape
    out = a.data.mean(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).astype(g.dtype),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a: Var, shape) -> Var:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(items: Sequence[Var], axis: int) -> Var:
    items = [_wrap(v) for v in items]
    sizes = [v.data.shape[axis] for v in items]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([v.data for v in items], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(out, items, bw)


def getitem(a: Var, index) -> Var:
    """Basic (slice) indexing only."""
    shape, dtype = a.data.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bw)


def broadcast_to(a: Var, shape) -> Var:
    old = a.data.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def embedding(table: Var, ids: np.ndarray) -> Var:
    """Row gather: ``table[ids]``."""
    td = table.data

    def bw(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (full,)

    return _make(td[ids], (table,), bw)


def pad_time(a: Var, before: int, after: int) -> Var:
    """Zero-pad axis -2."""
    n = a.data.shape[-2]
    widths = [(0, 0)] * a.data.ndim
    widths[-2] = (before, after)
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[..., before:before + n, :],))


def pool_time(a: Var, factor: int) -> Var:
    """Mean over consecutive groups of ``factor`` rows along axis -2; the last
    group averages only the rows it actually has."""
    x = a.data
    t = x.shape[-2]
    n_out = -(-t // factor)
    pad = n_out * factor - t
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, pad), (0, 0)])
    grouped = xp.reshape(x.shape[:-2] + (n_out, factor, x.shape[-1]))
    counts = np.full(n_out, factor, dtype=x.dtype)
    counts[-1] = factor - pad
    out = grouped.sum(axis=-2) / counts[:, None]

    def bw(g):
        gg = np.repeat(g / counts[:, None], factor, axis=-2)
        return (gg[..., :t, :],)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- nonlinearities

def silu(a: Var) -> Var:
    x = a.data
    s = tc.sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def gelu(a: Var) -> Var:
    x = a.data
    c, k = np.asarray(tc.GELU_C, x.dtype), np.asarray(tc.GELU_A, x.dtype)
    t = np.tanh(c * (x + k * x * x * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), bw)


def softmax(a: Var, mask: np.ndarray | None = None) -> Var:
    """Softmax over the last axis; ``mask`` (broadcastable, bool) marks
    positions that receive zero probability."""
    x = a.data
    if mask is not None:
        x = np.where(mask, np.asarray(-np.inf, x.dtype), x)
    y = tc.softmax_lastdim(x)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw)


def rmsnorm(a: Var, gain: Var, eps: float) -> Var:
    x, w = a.data, gain.data
    if w.shape != (x.shape[-1],):
        raise tc.ShapeError(f"rmsnorm gain {w.shape} does not match last dim of {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.asarray(eps, x.dtype))
    xhat = x * inv

    def bw(g):
        gw = g * w
        gx = inv * (gw - xhat * (gw * xhat).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _make(xhat * w, (a, gain), bw)


def rope(a: Var, positions: np.ndarray, base: float = 10000.0) -> Var:
    """Rotary position encoding on [..., T, head_dim] using the half-split layout."""
    x = a.data
    hd = x.shape[-1]
    half = hd // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / hd)
    ang = positions.astype(np.float64)[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    def rot(v, s):
        v1, v2 = v[..., :half], v[..., half:]
        return np.concatenate([v1 * cos - v2 * s, v1 * s + v2 * cos], axis=-1)

    return _make(rot(x, sin), (a,), lambda g: (rot(g, -sin),))


def cross_entropy(logits: Var, targets: np.ndarray, weights: np.ndarray) -> Var:
    """Weighted mean of token negative log-likelihoods.

    ``targets`` are integer ids shaped like ``logits.shape[:-1]``; ``weights``
    has the same shape and is 0 at positions that carry no loss.
    """
    x = logits.data
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("cross_entropy: no positions carry loss")
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    logp = x - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = weights.astype(x.dtype)
    loss = -(picked * w).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / total)[..., None] * g,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def custom(data: np.ndarray, parents: Sequence[Var], fn) -> Var:
    """Attach an arbitrary backward function (used by the quantizer's STE)."""
    return _make(data, parents, fn)
