"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Deliberately small: exactly the operations a compact convolutional/attention
classifier and gradient-driven input perturbations need. Everything is
float64, forward results are deterministic given identical inputs, and each
op records a local backward rule so input gradients can be queried repeatedly
(one fresh graph per query).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "conv2d",
    "cross_entropy",
    "matmul",
    "mean",
    "relu",
    "reshape",
    "sign",
    "softmax",
    "sqrt",
    "sum_",
    "swap_last_axes",
    "tanh",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``data`` is a row-major numpy array; ``requires_grad`` marks leaves whose
    gradient should be reported by :func:`backward`. Tensors produced by ops
    keep references to their parents and a local backward rule.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_rule = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history."""
        return Tensor(self.data.copy())

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic: scalars and broadcast-compatible arrays are accepted on
    # either side; incompatible shapes raise ShapeError naming both shapes
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, rule) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_data(a, b, opname):
    ta, tb = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(ta.data.shape, tb.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: incompatible shapes {ta.data.shape} and {tb.data.shape}"
        ) from None
    return ta, tb


def add(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "add")
    out = ta.data + tb.data

    def rule(g):
        return (
            _unbroadcast(g, ta.data.shape) if ta.requires_grad else None,
            _unbroadcast(g, tb.data.shape) if tb.requires_grad else None,
        )

    return _node(out, (ta, tb), rule)


def sub(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "sub")
    out = ta.data - tb.data

    def rule(g):
        return (
            _unbroadcast(g, ta.data.shape) if ta.requires_grad else None,
            _unbroadcast(-g, tb.data.shape) if tb.requires_grad else None,
        )

    return _node(out, (ta, tb), rule)


def mul(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "mul")
    out = ta.data * tb.data

    def rule(g):
        return (
            _unbroadcast(g * tb.data, ta.data.shape) if ta.requires_grad else None,
            _unbroadcast(g * ta.data, tb.data.shape) if tb.requires_grad else None,
        )

    return _node(out, (ta, tb), rule)


def sign(a) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient defined as 0 everywhere."""
    ta = as_tensor(a)

    def rule(g):
        return (np.zeros_like(ta.data),)

    return _node(np.sign(ta.data), (ta,), rule)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient is 1 inside the bounds, 0 outside."""
    if not lo < hi:
        raise ValueError(f"clip needs lo < hi, got ({lo}, {hi})")
    ta = as_tensor(a)
    out = np.clip(ta.data, lo, hi)

    def rule(g):
        inside = (ta.data >= lo) & (ta.data <= hi)
        return (g * inside,)

    return _node(out, (ta,), rule)


def relu(a) -> Tensor:
    ta = as_tensor(a)
    out = np.maximum(ta.data, 0.0)

    def rule(g):
        return (g * (ta.data > 0.0),)

    return _node(out, (ta,), rule)


def tanh(a) -> Tensor:
    ta = as_tensor(a)
    out = np.tanh(ta.data)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _node(out, (ta,), rule)


def sqrt(a) -> Tensor:
    """Elementwise square root; the subgradient at 0 is taken as 0."""
    ta = as_tensor(a)
    out = np.sqrt(ta.data)

    def rule(g):
        d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return _node(out, (ta,), rule)


def reshape(a, shape) -> Tensor:
    ta = as_tensor(a)
    out = ta.data.reshape(shape)

    def rule(g):
        return (g.reshape(ta.data.shape),)

    return _node(out, (ta,), rule)


def swap_last_axes(a) -> Tensor:
    """Transpose the trailing two axes (matrix transpose for stacked matrices)."""
    ta = as_tensor(a)

    def rule(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(ta.data, -1, -2), (ta,), rule)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _node(out, ts, rule)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    out = ta.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ta.data.shape).copy(),)

    return _node(out, (ta,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    if axis is None:
        count = ta.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([ta.data.shape[ax] for ax in axes]))
    return mul(sum_(ta, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports 2D @ 2D, stacked ND @ ND with identical leading axes, and
    stacked ND @ 2D (shared right operand, e.g. a weight matrix applied to
    a batch).
    """
    ta, tb = as_tensor(a), as_tensor(b)
    da, db = ta.data, tb.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {da.shape} and {db.shape}")
    if db.ndim > 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(f"matmul: leading axes disagree for {da.shape} and {db.shape}")
    out = np.matmul(da, db)

    def rule(g):
        ga = gb = None
        if ta.requires_grad:
            ga = np.matmul(g, np.swapaxes(db, -1, -2))
        if tb.requires_grad:
            gb = np.matmul(np.swapaxes(da, -1, -2), g)
            if db.ndim == 2 and gb.ndim > 2:
                gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return (ga, gb)

    return _node(out, (ta, tb), rule)


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is (c_in, h, w) or batched (n, c_in, h, w); ``kernels`` is
    (c_out, c_in, kh, kw). Output spatial size is
    floor((h + 2*padding - kh) / stride) + 1, analogously for w.
    """
    tx, tw = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got ({stride}, {padding})")
    single = tx.data.ndim == 3
    xd = tx.data[None] if single else tx.data
    if xd.ndim != 4 or tw.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks for input {tx.data.shape} / kernels {tw.data.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = tw.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input "
            f"({h + 2 * padding}x{w + 2 * padding})"
        )

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c_in, h', w', kh, kw)
    out = np.einsum("ncxyij,ocij->noxy", win, tw.data, optimize=True)

    def rule(g):
        g = g[None] if single else g
        gx = gw = None
        if tw.requires_grad:
            gw = np.einsum("noxy,ncxyij->ocij", g, win, optimize=True)
        if tx.requires_grad:
            gwin = np.einsum("noxy,ocij->ncxyij", g, tw.data, optimize=True)
            gxp = np.zeros_like(xp)
            hh, ww = g.shape[-2], g.shape[-1]
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * hh : stride, j : j + stride * ww : stride] += (
                        gwin[:, :, :, :, i, j]
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if single:
                gx = gx[0]
        return (gx, gw)

    return _node(out[0] if single else out, (tx, tw), rule)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; outputs sum to 1."""
    ta = as_tensor(a)
    shifted = ta.data - ta.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (ta,), rule)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Negative log softmax probability of the true class.

    ``logits`` is (k,) or (n, k); ``labels`` an int or an (n,) int array.
    The gradient w.r.t. logits is softmax(logits) - onehot(label), scaled by
    1/n under mean reduction.
    """
    ta = as_tensor(logits)
    single = ta.data.ndim == 1
    z = ta.data[None] if single else ta.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 1D or 2D, got {ta.data.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} rows but {y.shape[0]} labels")
    n, k = z.shape
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")

    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    losses = -logp[np.arange(n), y]
    total = losses.sum()
    out = total / n if reduction == "mean" else total

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        scale = g / n if reduction == "mean" else g
        gz = p * scale
        return (gz[0] if single else gz,)

    return _node(out, (ta,), rule)


class GradTape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Every node's parents precede it in ``nodes``; walking the list in reverse
    and applying each node's local rule performs one backward pass.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        order, seen, stack = [], set(), [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, root: Tensor) -> dict:
        grads = {id(root): np.ones_like(root.data)}
        result = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_rule is None:
                node.grad = g
                result[node] = g
            if node._backward_rule is None:
                continue
            parent_grads = node._backward_rule(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return result


def backward(root: Tensor) -> dict:
    """Backpropagate from a scalar root.

    Returns a map from each reachable ``requires_grad`` leaf tensor to its
    gradient (also stored on ``leaf.grad``). Repeated calls recompute from
    scratch and return identical values.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    return GradTape.trace(root).run(root)
