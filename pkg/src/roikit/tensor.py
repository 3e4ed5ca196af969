"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Every operation is a pure function from ``Tensor`` inputs to a ``Tensor``
output and carries a hand-written vector-Jacobian product. ``backward``
walks the recorded graph in reverse topological order; there is no general
tape machinery beyond that, and no in-place mutation of inputs.

Arrays are numpy-backed. The element type is the run-wide switch in
:mod:`roikit.precision` (float32 for training/bench, float64 for
verification).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .precision import dtype

# Most-negative finite value stands in for -inf in masked softmax so that
# exp() underflows to an exact 0.0 instead of propagating NaNs.
def _neg_inf(dt: np.dtype) -> float:
    return float(np.finfo(dt).min)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """A numpy array plus an optional gradient slot and a vjp closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (),
                 vjp: Optional[Callable[[np.ndarray], Sequence[np.ndarray]]] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode accumulation into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"vjp produced shape {pg.shape} for input of shape {parent.data.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return Tensor(a.data + b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return Tensor(a.data - b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return Tensor(a.data * b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g * b.data, a.shape),
                                 _unbroadcast(g * a.data, b.shape)))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.data * s, parents=(a,), vjp=lambda g: (g * s,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    # exp of a non-positive argument only, so large |x| cannot overflow.
    e = np.exp(-np.abs(a.data))
    sig = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = a.data * sig
    return Tensor(out, parents=(a,),
                  vjp=lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return Tensor(t, parents=(a,), vjp=lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# reductions / shape plumbing
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).copy()
                    if g.ndim == 0 else np.full(a.shape, g.reshape(-1)[0], dtype=g.dtype),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(g.dtype, copy=True),)

    if out.ndim == 0:
        out = out.reshape(1)

        def vjp0(g):
            return (np.full(a.shape, g.reshape(-1)[0], dtype=g.dtype),)
        return Tensor(out, parents=(a,), vjp=vjp0)
    return Tensor(out, parents=(a,), vjp=vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.reshape(shape), parents=(a,),
                  vjp=lambda g: (g.reshape(a.shape),))


def moveaxis(a, src, dst) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.moveaxis(a.data, src, dst).copy(), parents=(a,),
                  vjp=lambda g: (np.moveaxis(g, dst, src).copy(),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  parents=tuple(parts), vjp=vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor(a.data[idx].copy(), parents=(a,), vjp=vjp)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return Tensor(table.data[ids], parents=(table,), vjp=vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor(out, parents=(a, b), vjp=vjp)


def softmax(x, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stabilized softmax with optional validity masking.

    Masked positions receive a most-negative-finite logit, which makes their
    normalized weight an exact 0.0. A slice with no unmasked entry is a
    caller error (blend guarantees the global slot is always valid).
    """
    x = _as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: fully-masked slice along reduction axis")
        logits = np.where(mask, logits, _neg_inf(logits.dtype))
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Tensor(s, parents=(x,), vjp=vjp)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalization to zero mean / unit variance along ``axis`` (pre-affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[axis]

    def vjp(g):
        gy = g * inv
        gx = gy - gy.mean(axis=axis, keepdims=True) \
            - y * (gy * y).mean(axis=axis, keepdims=True)
        return (gx,)

    return Tensor(y, parents=(x,), vjp=vjp)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Per-pixel linear map over the channel axis of a (b, c, h, w) feature."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv1x1 channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    out = np.einsum("bchw,oc->bohw", x.data, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def vjp(g):
        gx = np.einsum("bohw,oc->bchw", g, weight.data, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return Tensor(out, parents=tuple(parents), vjp=vjp)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Same-padded kxk convolution over (b, c, h, w), im2col-backed."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, cin, h, w = x.shape
    cout, cin_w, k, _ = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (b, cin, k, k, ho, wo), (sb, sc, sh, sw, sh * stride, sw * stride))
    cols2 = cols.reshape(b, cin * k * k, ho * wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols2).reshape(b, cout, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def vjp(g):
        gmat = g.reshape(b, cout, ho * wo)
        gw = np.einsum("bop,bcp->oc", gmat, cols2, optimize=True).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gmat).reshape(b, cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + ho * stride:stride, dj:dj + wo * stride:stride] += \
                    gcols[:, :, di, dj]
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return Tensor(out, parents=tuple(parents), vjp=vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (b, c, h, w) feature."""
    x = _as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return Tensor(out, parents=(x,), vjp=vjp)
