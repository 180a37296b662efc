"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and, when gradients are required, records
the closure that pushes its gradient back to its parents. Calling
:meth:`Tensor.backward` on a result walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.

Only the operations needed by the counting networks are provided: the layer
primitives (conv2d, maxpool2, upsample2, relu, sigmoid, softmax2, global
average pooling, gradient reversal, linear) and the few elementwise and
reduction ops used to assemble losses.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _backend

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every upstream leaf.

        Intermediate results do not keep their gradients.
        """
        if self._backward is None:
            raise RuntimeError("backward() called on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"grad shape {grad.shape} does not match output {self.shape}")

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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"gradient of {node._op}")
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("only division by a Python scalar is supported")
        return mul(self, 1.0 / scalar)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data, parents, backward, op):
    out = Tensor(_check_finite(data, op))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and reductions -------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * ad * g,), "square")


def log(a):
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def reduce_sum(a, axis=None):
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def reduce_mean(a, axis=None):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis) / float(count)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] += g
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "take")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# layer primitives -------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def softmax2(x):
    """Softmax over a trailing axis of length 2, computed with max subtraction."""
    if x.shape[-1] != 2:
        raise ValueError(f"softmax2 expects a trailing axis of size 2, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax2")


def log_softmax2(x):
    """``log(softmax2(x))`` without forming the probabilities first."""
    if x.shape[-1] != 2:
        raise ValueError(f"log_softmax2 expects a trailing axis of size 2, got {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax2")


def bce_with_logits(z, target):
    """Elementwise binary cross-entropy of ``sigmoid(z)`` against ``target``.

    Uses ``softplus(z) - target * z`` which stays finite for any logit.
    """
    t = np.asarray(target, dtype=z.dtype)
    zd = z.data
    loss = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    s = _stable_sigmoid(zd)
    return _result(loss.astype(zd.dtype), (z,), lambda g: (g * (s - t),), "bce")


def global_avg_pool(x):
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def grad_reverse(x, scale=1.0):
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if not scale > 0:
        raise ValueError("gradient reversal scale must be positive")
    return _result(x.data.copy(), (x,), lambda g: (-scale * g,), "grad_reverse")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward, "linear")


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """2-D cross-correlation, NCHW input, weight (out, in, k, k).

    ``padding`` defaults to ``k // 2`` which preserves spatial size at stride 1.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {x.shape[1]}")
    if padding is None:
        padding = k // 2
    n, _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")

    xd = x.data if x.dtype == weight.dtype else x.data.astype(weight.dtype)
    cols = _backend.im2col(np.ascontiguousarray(xd), k, stride, padding)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    parents = [x, weight]
    if bias is not None:
        out += bias.data[:, None]
        parents.append(bias)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            dx = _backend.col2im(dcols, (n, cin, h, w), k, stride, padding).astype(x.dtype, copy=False)
        dw = np.zeros_like(wmat)
        for b in range(n):
            dw += g[b] @ cols[b].T
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _result(out.reshape(n, cout, ho, wo), parents, backward, "conv2d")


def maxpool2(x):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2 needs NCHW input with even spatial dims, got {x.shape}")
    out, arg = _backend.maxpool2_forward(x.data)
    return _result(out, (x,), lambda g: (_backend.maxpool2_backward(np.ascontiguousarray(g), arg),), "maxpool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 4:
        raise ValueError(f"upsample2 expects NCHW input, got shape {x.shape}")
    out = _backend.upsample2_forward(x.data)
    return _result(out, (x,), lambda g: (_backend.upsample2_backward(np.ascontiguousarray(g)),), "upsample2")
