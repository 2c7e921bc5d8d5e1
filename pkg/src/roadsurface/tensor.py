"""Dense 64-bit tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major ``numpy.float64`` array plus the tape
bookkeeping needed for reverse-mode differentiation: the tensors it was
computed from and a function mapping the output gradient to the parent
gradients.  Calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates ``.grad`` on every reachable
tensor that requires gradients.  Repeated backward calls accumulate
additively; callers zero gradients between optimization steps.

Every operation validates that its result is finite and raises
:class:`NumericsError` otherwise, so NaN/Inf never propagates silently
through the tape.

Convolutions use the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

_GRAD_ENABLED = True

# gelu tanh-approximation constants
_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float64 array participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    # -- backward engine ----------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into the reachable graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward root must be a scalar, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._grad_fn is None:
                continue
            for parent, pgrad in zip(node._parents, node._grad_fn(grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pgrad
                else:
                    pending[key] = pgrad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis):
        return tensor_max(self, axis)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data, parents, grad_fn, op_name):
    """Wrap an op result, checking finiteness and wiring the tape."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op_name}")
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape

    def grad_fn(g):
        return (g.reshape(original),)

    return _node(a.data.reshape(shape), (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), grad_fn, "transpose")


# -- reductions -------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_expanded, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g_expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_expanded / count, a.shape).copy(),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn, "mean")


def tensor_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; ties route their gradient to the first hit."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    idx = np.argmax(a.data, axis=axis)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(
            out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return (out,)

    return _node(a.data.max(axis=axis), (a,), grad_fn, "max")


def gather(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Pick elements along ``axis`` per ``numpy.take_along_axis`` semantics."""
    index = np.asarray(index)
    if index.ndim != a.ndim:
        raise DimensionError(
            f"gather index rank {index.ndim} must match tensor rank {a.ndim}"
        )

    def grad_fn(g):
        out = np.zeros_like(a.data)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(out, tuple(grids), g)
        return (out,)

    return _node(np.take_along_axis(a.data, index, axis), (a,), grad_fn, "gather")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading batch dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.shape} x {b.shape}"
        )

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


# -- convolutions -----------------------------------------------------------


def _conv_geometry(x, w, stride, pad, depthwise):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv expects 4-D input and 4-D weights")
    batch, channels, height, width = x.shape
    out_ch, w_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd extent, got {kh}x{kw}")
    if depthwise:
        if out_ch != channels or w_in != 1:
            raise DimensionError(
                f"depthwise weights must be ({channels},1,k,k), got {w.shape}"
            )
    elif w_in != channels:
        raise DimensionError(
            f"weight input channels {w_in} disagree with input {channels}"
        )
    h_out = (height + 2 * pad - kh) // stride + 1
    w_out = (width + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"non-positive conv output extent for input {height}x{width}, "
            f"kernel {kh}, stride {stride}, pad {pad}"
        )
    return kh, h_out, w_out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (B,C,H,W) with w (O,C,k,k) -> (B,O,H',W')."""
    k, h_out, w_out = _conv_geometry(x.data, w.data, stride, pad, depthwise=False)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((x.shape[0], w.shape[0], h_out, w_out))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * h_out : stride,
                       j : j + stride * w_out : stride]
            out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, i, j],
                             optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * h_out, stride)
                cols = slice(j, j + stride * w_out, stride)
                patch = xp[:, :, rows, cols]
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch,
                                           optimize=True)
                gxp[:, :, rows, cols] += np.einsum(
                    "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, grad_fn, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation: channel c sees only filter c."""
    k, h_out, w_out = _conv_geometry(x.data, w.data, stride, pad, depthwise=True)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((x.shape[0], x.shape[1], h_out, w_out))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * h_out : stride,
                       j : j + stride * w_out : stride]
            out += patch * w.data[None, :, 0, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * h_out, stride)
                cols = slice(j, j + stride * w_out, stride)
                patch = xp[:, :, rows, cols]
                gw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
                gxp[:, :, rows, cols] += g * w.data[None, :, 0, i, j, None, None]
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, grad_fn, "depthwise_conv2d")


# -- normalization and activations ------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1,
               eps: float = 1e-6) -> Tensor:
    """Standardize along ``axis`` (biased variance), then scale and shift."""
    axis = axis % x.ndim
    extent = x.shape[axis]
    if extent == 0:
        raise DimensionError("cannot normalize along a zero-length axis")
    if gamma.size != extent or beta.size != extent:
        raise DimensionError(
            f"scale/shift extent {gamma.size}/{beta.size} must equal {extent}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = extent
    gamma_b = gamma.data.reshape(bshape)
    beta_b = beta.data.reshape(bshape)

    mean = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    y = xhat * gamma_b + beta_b

    reduce_axes = tuple(d for d in range(x.ndim) if d != axis)

    def grad_fn(g):
        gh = g * gamma_b
        gx = inv * (
            gh
            - gh.mean(axis=axis, keepdims=True)
            - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
        )
        ggamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape)
        gbeta = g.sum(axis=reduce_axes).reshape(beta.shape)
        return gx, ggamma, gbeta

    return _node(y, (x, gamma, beta), grad_fn, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit via the tanh approximation:

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    u = _GELU_C0 * (x.data + _GELU_C1 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        sech2 = 1.0 - t * t
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * sech2 * du),)

    return _node(y, (x,), grad_fn, "gelu")


def tanh(x: Tensor) -> Tensor:
    """Exact hyperbolic tangent."""
    y = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - y * y),)

    return _node(y, (x,), grad_fn, "tanh")


def smooth_hardtanh(x: Tensor) -> Tensor:
    """Smooth rational tanh variant: (2*tanh(x) - 1) / (1 + tanh(x)^2).

    Unlike the conventional clamping hard-tanh this is differentiable
    everywhere, maps 0 to -1, and ranges over (-1.5, 0.5).  It is strictly
    increasing on [0, 1], which the background-suppression loss relies on.
    """
    t = np.tanh(x.data)
    denom = 1.0 + t * t
    y = (2.0 * t - 1.0) / denom

    def grad_fn(g):
        # d/dt of (2t-1)/(1+t^2), then chain through dt/dx = 1 - t^2
        df_dt = (2.0 + 2.0 * t - 2.0 * t * t) / (denom * denom)
        return (g * df_dt * (1.0 - t * t),)

    return _node(y, (x,), grad_fn, "smooth_hardtanh")


# -- classification loss ----------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    Computed through log-sum-exp so finite logits can never produce log(0).
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} must be ({logits.shape[0]},)"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ContractError("label index out of range")
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(batch), labels]
    loss = (lse - picked).mean()

    def grad_fn(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(batch), labels] -= 1.0
        return (probs * (g / batch),)

    return _node(loss, (logits,), grad_fn, "cross_entropy")
