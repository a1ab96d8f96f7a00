"""Dense tensors with reverse-mode automatic differentiation.

The engine stores values in numpy arrays (float32 for training, float64 for
gradient checking) and records a tape of parent links plus backward
closures as operations execute. ``backward`` walks the tape once in reverse
topological order and accumulates gradients into every tensor that
requires them; calling it again without clearing adds on top, which is the
documented accumulation behaviour.

Determinism: every operation lowers to a fixed sequence of numpy calls, so
repeated evaluation of the same graph on one platform is bit-identical.
Reductions use numpy's pairwise summation, whose order is a fixed function
of the array shape.

Mixing float32 and float64 operands in one operation is rejected rather
than silently promoted; the whole graph runs in a single precision chosen
by the caller.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_stack = [True]


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        _grad_stack.append(False)
        return self

    def __exit__(self, *exc):
        _grad_stack.pop()
        return False


def grad_enabled() -> bool:
    return _grad_stack[-1]


class Tensor:
    """A numpy array plus an optional gradient accumulator.

    grad stays None until a backward pass reaches the tensor; after that it
    is a same-shape float array that accumulates across backward calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(x, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def _join(a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ValidationError(
            f"mixed dtypes in one op: {a.data.dtype.name} vs {b.data.dtype.name}"
        )


def _make(data, parents, bk) -> Tensor:
    out = Tensor(data)
    need = grad_enabled() and any(p.requires_grad for p in parents)
    if need:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bk
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _acc(gmap: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    key = id(t)
    cur = gmap.get(key)
    gmap[key] = g if cur is None else cur + g


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _join(a, b)
    data = a.data + b.data

    def bk(g, gmap):
        _acc(gmap, a, _unbroadcast(g, a.shape))
        _acc(gmap, b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _join(a, b)
    data = a.data - b.data

    def bk(g, gmap):
        _acc(gmap, a, _unbroadcast(g, a.shape))
        _acc(gmap, b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bk)


def neg(a: Tensor) -> Tensor:
    def bk(g, gmap):
        _acc(gmap, a, -g)

    return _make(-a.data, (a,), bk)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _join(a, b)
    data = a.data * b.data
    va, vb = a.data, b.data

    def bk(g, gmap):
        _acc(gmap, a, _unbroadcast(g * vb, a.shape))
        _acc(gmap, b, _unbroadcast(g * va, b.shape))

    return _make(data, (a, b), bk)


def div(a: Tensor, b: Tensor) -> Tensor:
    _join(a, b)
    data = a.data / b.data
    va, vb = a.data, b.data

    def bk(g, gmap):
        _acc(gmap, a, _unbroadcast(g / vb, a.shape))
        _acc(gmap, b, _unbroadcast(-g * va / (vb * vb), b.shape))

    return _make(data, (a, b), bk)


def pow_const(a: Tensor, p: float) -> Tensor:
    va = a.data
    data = va ** p

    def bk(g, gmap):
        _acc(gmap, a, g * (p * va ** (p - 1)))

    return _make(data, (a,), bk)


def square(a: Tensor) -> Tensor:
    va = a.data

    def bk(g, gmap):
        _acc(gmap, a, g * (2.0 * va))

    return _make(va * va, (a,), bk)


# -- matrix products ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _join(a, b)
    va, vb = a.data, b.data
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
    data = va @ vb

    def bk(g, gmap):
        _acc(gmap, a, g @ vb.T)
        _acc(gmap, b, va.T @ g)

    return _make(data, (a, b), bk)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacks of matrices: [B,m,k] @ [B,k,n]."""
    _join(a, b)
    va, vb = a.data, b.data
    if va.ndim != 3 or vb.ndim != 3 or va.shape[0] != vb.shape[0] or va.shape[2] != vb.shape[1]:
        raise ValidationError(f"bmm shape mismatch: {va.shape} @ {vb.shape}")
    data = np.matmul(va, vb)

    def bk(g, gmap):
        _acc(gmap, a, np.matmul(g, vb.transpose(0, 2, 1)))
        _acc(gmap, b, np.matmul(va.transpose(0, 2, 1), g))

    return _make(data, (a, b), bk)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bk(g, gmap):
        _acc(gmap, a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bk)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bk(g, gmap):
        _acc(gmap, a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bk)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValidationError("concat of zero tensors")
    for t in tensors[1:]:
        _join(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bk(g, gmap):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(gmap, t, g[tuple(sl)])

    return _make(data, tuple(tensors), bk)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    n = a.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ValidationError(f"narrow [{start}:{start + length}] outside axis of size {n}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bk(g, gmap):
        z = np.zeros(a.shape, dtype=g.dtype)
        z[sl] = g
        _acc(gmap, a, z)

    return _make(a.data[sl], (a,), bk)


def gather_rows(m: Tensor, idx) -> Tensor:
    """Row lookup m[idx]; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValidationError(f"gather_rows wants 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ValidationError(f"gather_rows index out of range for table of {m.shape[0]} rows")

    def bk(g, gmap):
        z = np.zeros(m.shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        _acc(gmap, m, z)

    return _make(m.data[idx], (m,), bk)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bk(g, gmap):
        if axis is None:
            _acc(gmap, a, np.broadcast_to(g, a.shape).astype(g.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(gmap, a, np.broadcast_to(gg, a.shape).astype(g.dtype, copy=True))

    return _make(data, (a,), bk)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)
    inv = 1.0 / count

    def bk(g, gmap):
        if axis is None:
            _acc(gmap, a, np.broadcast_to(g * inv, a.shape).astype(g.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(gmap, a, np.broadcast_to(gg * inv, a.shape).astype(g.dtype, copy=True))

    return _make(data, (a,), bk)


# -- elementwise nonlinearities ----------------------------------------------


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bk(g, gmap):
        _acc(gmap, a, g * data)

    return _make(data, (a,), bk)


def tlog(a: Tensor) -> Tensor:
    va = a.data

    def bk(g, gmap):
        _acc(gmap, a, g / va)

    return _make(np.log(va), (a,), bk)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bk(g, gmap):
        _acc(gmap, a, g * (0.5 / data))

    return _make(data, (a,), bk)


def tsin(a: Tensor) -> Tensor:
    va = a.data

    def bk(g, gmap):
        _acc(gmap, a, g * np.cos(va))

    return _make(np.sin(va), (a,), bk)


def tcos(a: Tensor) -> Tensor:
    va = a.data

    def bk(g, gmap):
        _acc(gmap, a, -g * np.sin(va))

    return _make(np.cos(va), (a,), bk)


def sigmoid(a: Tensor) -> Tensor:
    va = a.data
    data = 1.0 / (1.0 + np.exp(-va))

    def bk(g, gmap):
        _acc(gmap, a, g * data * (1.0 - data))

    return _make(data, (a,), bk)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth nonlinearity used throughout."""
    va = a.data
    s = 1.0 / (1.0 + np.exp(-va))
    data = va * s

    def bk(g, gmap):
        _acc(gmap, a, g * (s * (1.0 + va * (1.0 - s))))

    return _make(data, (a,), bk)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bk(g, gmap):
        _acc(gmap, a, g * (1.0 - data * data))

    return _make(data, (a,), bk)


# -- fused normalization and attention pieces ---------------------------------


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (population).

    No learned affine; scale and shift come from modulation instead.
    """
    if x.shape[-1] < 2:
        raise ValidationError(f"layer_norm needs last dim >= 2, got shape {x.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    y = xc * istd

    def bk(g, gmap):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _acc(gmap, x, istd * (g - gm - y * gy))

    return _make(y, (x,), bk)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bk(g, gmap):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(gmap, x, y * (g - dot))

    return _make(y, (x,), bk)


def rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) channel pairs of x by fixed angles.

    x has shape [..., L, dh]; cos and sin have shape [L, dh // 2] and are
    plain arrays since positions are not differentiated.
    """
    v = x.data
    if v.shape[-1] % 2 != 0:
        raise ValidationError(f"rope_apply needs an even channel count, got {v.shape[-1]}")
    if cos.shape != (v.shape[-2], v.shape[-1] // 2):
        raise ValidationError(
            f"rope table shape {cos.shape} does not match input {v.shape}"
        )
    c = cos.astype(v.dtype, copy=False)
    s = sin.astype(v.dtype, copy=False)
    xe = v[..., 0::2]
    xo = v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c

    def bk(g, gmap):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = -ge * s + go * c
        _acc(gmap, x, gx)

    return _make(out, (x,), bk)


# -- backward pass -------------------------------------------------------------


def _topo(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into .grad of every requiring tensor."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not require grad; nothing to differentiate")
    order = _topo(loss)
    gmap = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = gmap.get(id(node))
        if g is None or node._backward is None:
            continue
        node._backward(g, gmap)
    for node in order:
        if node.requires_grad:
            g = gmap.get(id(node))
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
