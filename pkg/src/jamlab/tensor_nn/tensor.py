"""Dense tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output gradient
to one gradient per parent. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates into ``.grad``.

Arrays keep the dtype they were created with; training uses float32 and the
gradient checker re-runs the same graph in float64.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_strict = False
_branches = None


class GraphError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class NumericError(FloatingPointError):
    """Raised in strict mode when an operation produces NaN or inf."""


@contextmanager
def strict_mode(enabled=True):
    """Check every op output for non-finite values while active."""
    global _strict
    prev = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = prev


@contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, max indices) ops make while active.

    Two evaluations that record the same choices lie on the same smooth piece
    of a piecewise-smooth graph.
    """
    global _branches
    prev = _branches
    _branches = []
    try:
        yield _branches
    finally:
        _branches = prev


def note_branch(choice):
    """Record a discrete choice for ``record_branches``; no-op otherwise."""
    if _branches is not None:
        _branches.append(np.array(choice, copy=True))


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    if _strict and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor(data, _parents=tuple(parents), _op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise GraphError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# elementwise binary ops


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def matmul(a, b):
    """Batched matrix product with numpy ``@`` semantics (operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# elementwise unary ops


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x, p):
    x = as_tensor(x)
    p = float(p)
    return _result(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "pow")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result(y, (x,), backward, "gelu")


# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(1, np.size(y))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(y, (x,), backward, "mean")


def tmax(x, axis=-1, keepdims=False):
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    note_branch(idx)
    idx_k = np.expand_dims(idx, axis)
    y = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        y = np.squeeze(y, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return _result(y, (x,), backward, "max")


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x, idx):
    x = as_tensor(x)
    y = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(y, copy=True), (x,), backward, "index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise GraphError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(y, tensors, backward, "stack")


def split(x, sections, axis):
    """Split into equal sections; each piece is a differentiable slice."""
    n = x.shape[axis]
    if n % sections:
        raise GraphError(f"axis of size {n} does not split into {sections}")
    step = n // sections
    out = []
    for i in range(sections):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        out.append(x[tuple(sl)])
    return out


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def cross_entropy_from_probs(probs, labels, eps=1e-9):
    """Batch-mean of -log(p[i, y_i] + eps) for probability rows ``probs``."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise GraphError(f"probs {probs.shape} and labels {labels.shape} mismatch")
    picked = probs[np.arange(len(labels)), labels]
    return -mean(log(picked + eps))


# convolution and pooling


def _conv_out(n, k, stride, pad):
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise GraphError(f"kernel {k} does not fit input {n} with padding {pad}")
    return out


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation over NCHW input.

    ``groups`` is either 1 or equal to the channel count (depthwise, one
    filter per channel).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise GraphError("conv2d wants x (B,C,H,W) and w (O,C/g,kh,kw)")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    s, p = stride, padding
    Ho, Wo = _conv_out(H, kh, s, p), _conv_out(W, kw, s, p)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    if groups == 1:
        if Cg != C:
            raise GraphError(f"conv2d expects {Cg} input channels, got {C}")
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
        wmat = w.data.reshape(O, -1)
        y = (wmat @ cols).reshape(B, O, Ho, Wo)
    elif groups == C and O == C and Cg == 1:
        cols = None
        y = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
                y += w.data[:, 0, i, j][None, :, None, None] * patch
    else:
        raise GraphError("conv2d supports groups == 1 or depthwise groups == C == O")

    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gxp = np.zeros_like(xp)
        if cols is not None:
            g2 = g.reshape(B, O, Ho * Wo)
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
            gcols = (wmat.T @ g2).reshape(B, C, kh, kw, Ho, Wo)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += gcols[:, :, i, j]
        else:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                    gxp[sl] += w.data[:, 0, i, j][None, :, None, None] * g
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return out

    return _result(y, parents, backward, "conv2d")


def conv1d(x, w, b=None, stride=1, padding=0, groups=1):
    """1-D cross-correlation over (B, C, L) input, w of shape (O, C/g, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise GraphError("conv1d wants x (B,C,L) and w (O,C/g,k)")
    B, C, L = x.shape
    O, Cg, k = w.shape
    Lo = _conv_out(L, k, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding)))
    if groups != 1:
        raise GraphError("conv1d supports groups == 1")
    if Cg != C:
        raise GraphError(f"conv1d expects {Cg} input channels, got {C}")
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, : stride * (Lo - 1) + 1 : stride]
    cols = win.transpose(0, 1, 3, 2).reshape(B, C * k, Lo)
    wmat = w.data.reshape(O, -1)
    y = wmat @ cols
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None]
        parents.append(b)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = (wmat.T @ g).reshape(B, C, k, Lo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, :, i : i + stride * (Lo - 1) + 1 : stride] += gcols[:, :, i]
        gx = gxp[:, :, padding : padding + L] if padding else gxp
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return out

    return _result(y, parents, backward, "conv1d")


def avg_pool2d(x, k):
    B, C, H, W = x.shape
    if H % k or W % k:
        raise GraphError(f"pool size {k} must divide {H}x{W}")
    return x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))


def max_pool2d(x, k):
    B, C, H, W = x.shape
    if H % k or W % k:
        raise GraphError(f"pool size {k} must divide {H}x{W}")
    t = x.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
    return tmax(t.reshape(B, C, H // k, W // k, k * k), axis=-1)


def max_pool1d(x, k):
    B, C, L = x.shape
    if L % k:
        raise GraphError(f"pool size {k} must divide {L}")
    return tmax(x.reshape(B, C, L // k, k), axis=-1)


def pad2d(x, p, value=0.0):
    """Constant-pad the last two axes by ``p`` on every side."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    y = np.pad(x.data, widths, constant_values=value)
    H, W = x.shape[-2:]
    return _result(y, (x,), lambda g: (g[..., p : p + H, p : p + W],), "pad2d")


def unfold2d(x, k, padding=0):
    """Sliding k x k neighbourhoods: (B, C, H, W) -> (B, C, H', W', k*k), stride 1."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, k, 1, padding), _conv_out(W, k, 1, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    y = win.reshape(B, C, Ho, Wo, k * k).copy()

    def backward(g):
        gxp = np.zeros_like(xp)
        g5 = g.reshape(B, C, Ho, Wo, k, k)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + Ho, j : j + Wo] += g5[..., i, j]
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx,)

    return _result(y, (x,), backward, "unfold2d")
