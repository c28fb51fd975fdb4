"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward`
walks the recorded graph in reverse topological order. Graphs are rebuilt
on every forward pass (define-by-run) and are released after one backward.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "GradCheckError",
    "no_grad",
    "tensor",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "absolute",
    "power",
    "softplus",
    "sigmoid",
    "tanh",
    "sum",
    "mean",
    "exclusive_prefix_sum",
    "matmul",
    "affine",
    "conv",
    "conv2d",
    "conv_at",
    "reshape",
    "transpose",
    "concat",
    "where",
    "take",
    "scatter_add",
    "softmax",
]


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class GradCheckError(ArithmeticError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float64 value, optionally a node in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = None
        out._backward = None
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def absolute(a) -> Tensor:
    """|a|; the derivative at exactly zero is taken as 0."""
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if p == 2:
        return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    if p == 1:
        return _result(ad.copy(), (a,), lambda g: (g,))
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def softplus(a) -> Tensor:
    """max(x, 0) + log1p(exp(-|x|)); never overflows."""
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.log1p(e)
    out += np.maximum(x, 0.0)

    def bw(g):
        s = np.where(x >= 0, 1.0, e)
        s /= 1.0 + e
        s *= g
        return (s,)

    return _result(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axes, keepdims), float(count))


def exclusive_prefix_sum(a, axis: int) -> Tensor:
    """out[..., i, ...] = sum of a[..., :i, ...] along ``axis``; out[0] = 0."""
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    x = np.moveaxis(a.data, ax, -1)
    out = np.zeros_like(x)
    np.cumsum(x[..., :-1], axis=-1, out=out[..., 1:])

    def bw(g):
        gm = np.moveaxis(g, ax, -1)
        # d out[k] / d a[i] = 1 for i < k  ->  reverse exclusive scan
        rev = np.zeros_like(gm)
        np.cumsum(gm[..., :0:-1], axis=-1, out=rev[..., -2::-1])
        return (np.moveaxis(rev, -1, ax),)

    return _result(np.moveaxis(out, -1, ax), (a,), bw)


# ---------------------------------------------------------------- linear maps


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b over the last axis of x."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), bw)


def conv(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channel-last N-d convolution (cross-correlation).

    x: (B, *spatial, C_in); kernel: (*window, C_in, C_out); bias: (C_out,).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    nd = kernel.ndim - 2
    if nd < 1 or x.ndim != nd + 2 or x.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"conv shapes incompatible: x {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    window = kernel.shape[:nd]
    cin, cout = kernel.shape[-2], kernel.shape[-1]
    batch = x.shape[0]
    xd = x.data
    if padding:
        pads = [(0, 0)] + [(padding, padding)] * nd + [(0, 0)]
        xd = np.pad(xd, pads)
    padded_shape = xd.shape
    out_sp = tuple((padded_shape[1 + i] - window[i]) // stride + 1 for i in range(nd))
    if any(n < 1 for n in out_sp):
        raise ShapeError(f"kernel {window} larger than padded input {padded_shape[1:-1]}")
    spatial_axes = tuple(range(1, nd + 1))
    win = sliding_window_view(xd, window, axis=spatial_axes)
    win = win[(slice(None),) + tuple(slice(0, n * stride, stride) for n in out_sp)]
    # (B, *O, C_in, *K) -> (B, *O, *K, C_in)
    order = (0,) + tuple(range(1, nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
    rows = batch * int(np.prod(out_sp))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(rows, -1)
    wmat = kernel.data.reshape(-1, cout)
    out = (cols @ wmat).reshape((batch,) + out_sp + (cout,))
    parents = [x, kernel]
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} != ({cout},)")
        out += b.data
        parents.append(b)
    x_shape = x.shape

    def bw(g):
        g2 = g.reshape(rows, cout)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape((batch,) + out_sp + tuple(window) + (cin,))
            dxp = np.zeros(padded_shape)
            lead = (slice(None),) * (nd + 1)
            for k in np.ndindex(*window):
                dst = (slice(None),) + tuple(
                    slice(k[i], k[i] + stride * (out_sp[i] - 1) + 1, stride) for i in range(nd)
                )
                dxp[dst] += dcols[lead + k]
            if padding:
                crop = (slice(None),) + (slice(padding, -padding),) * nd + (slice(None),)
                dxp = dxp[crop]
            gx = dxp.reshape(x_shape)
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk, gb) if b is not None else (gx, gk)

    return _result(out, parents, bw)


def conv_at(x, kernel, bias, positions, padding: int | None = None) -> Tensor:
    """Stride-1 channel-last convolution evaluated only at ``positions``.

    positions: (n, nd) integer output coordinates. Returns (n, C_out); equals
    ``conv(x, kernel, bias, 1, padding)[0][positions]`` for a batch of one.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    nd = kernel.ndim - 2
    if x.ndim != nd + 2 or x.shape[0] != 1 or x.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"conv_at shapes incompatible: x {x.shape}, kernel {kernel.shape}")
    window = kernel.shape[:nd]
    cin, cout = kernel.shape[-2], kernel.shape[-1]
    pad = window[0] // 2 if padding is None else padding
    pos = np.asarray(positions, dtype=np.intp).reshape(-1, nd)
    xd = np.pad(x.data[0], [(pad, pad)] * nd + [(0, 0)]) if pad else x.data[0]
    win = sliding_window_view(xd, window, axis=tuple(range(nd)))  # (*P, C_in, *K)
    cols = win[tuple(pos.T)]  # (n, C_in, *K)
    cols = np.ascontiguousarray(np.moveaxis(cols, 1, -1)).reshape(len(pos), -1)
    wmat = kernel.data.reshape(-1, cout)
    out = cols @ wmat
    parents = [x, kernel]
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        out += b.data
        parents.append(b)
    padded_shape = xd.shape

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            dcols = (g @ wmat.T).reshape((len(pos),) + tuple(window) + (cin,))
            dxp = np.zeros(padded_shape)
            for k in np.ndindex(*window):
                np.add.at(dxp, tuple((pos + np.array(k)).T), dcols[(slice(None),) + k])
            if pad:
                dxp = dxp[(slice(pad, -pad),) * nd]
            gx = dxp[None]
        if kernel.requires_grad:
            gk = (cols.T @ g).reshape(kernel.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=0)
        return (gx, gk, gb) if b is not None else (gx, gk)

    return _result(out, parents, bw)


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """NCHW 2-d convolution with an (C_out, C_in, kh, kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    y = conv(transpose(x, (0, 2, 3, 1)), transpose(kernel, (2, 3, 1, 0)), bias, stride, padding)
    return transpose(y, (0, 3, 1, 2))


# ------------------------------------------------------------------ structure


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    (ax,) = _norm_axis(axis, len(ref))
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {ax}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def where(cond, a, b) -> Tensor:
    """Select a where cond is true else b; cond is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _broadcast_shape(_broadcast_shape(a.shape, b.shape), cond.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(cond, g, zero), sa) if a.requires_grad else None,
            _unbroadcast(np.where(cond, zero, g), sb) if b.requires_grad else None,
        )

    out = np.where(cond, a.data, b.data)
    return _result(np.broadcast_to(out, shape).copy() if out.shape != shape else out, (a, b), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    (ax,) = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + tuple(np.delete(np.array(shape), ax)))
        full = np.zeros((shape[ax],) + gm.shape[1:])
        np.add.at(full, idx.reshape(-1), gm)
        return (np.moveaxis(full, 0, ax),)

    return _result(np.take(a.data, idx, axis=ax), (a,), bw)


def scatter_add(src, index, size: int) -> Tensor:
    """out[index[i]] += src[i] along axis 0; out has ``size`` rows."""
    src = _as_tensor(src)
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != src.shape[:1]:
        raise ShapeError(f"index shape {idx.shape} does not match source rows {src.shape[:1]}")
    out = np.zeros((size,) + src.shape[1:])
    np.add.at(out, idx, src.data)
    return _result(out, (src,), lambda g: (g[idx],))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents or ():
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss; returns {leaf: gradient of this loss}.

    Leaf gradients also accumulate into ``leaf.grad``. The graph is released
    afterwards, so a second call on the same loss raises GraphError.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires grad")
    if loss._consumed:
        raise GraphError("graph already backpropagated; run a fresh forward pass first")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    table: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            table[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = None
            node._consumed = True
    loss._consumed = True
    return table


# ----------------------------------------------------------------- grad check


def grad_check(
    fn: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    coords: Iterable[tuple[int, int]] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` receives the point tensor(s) positionally and returns a scalar.
    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    ``coords`` restricts the check to (tensor index, flat index) pairs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    saved_flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        out = fn(*points)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError("non-finite function value at the base point")
        backward(out)
        analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in points]
        if coords is None:
            coords = [(i, j) for i, p in enumerate(points) for j in range(p.size)]
        worst = 0.0
        with no_grad():
            for i, j in coords:
                flat = points[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + eps
                fp = fn(*points).item()
                flat[j] = orig - eps
                fm = fn(*points).item()
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic[i].reshape(-1)[j]
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    raise GradCheckError(f"non-finite gradient at coordinate {(i, j)}")
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
        return worst
    finally:
        for p, flag in zip(points, saved_flags):
            p.requires_grad = flag
            p.grad = None
